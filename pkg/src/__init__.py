# ONH phenotyping: structural parameters, point-cloud classification and critical-point maps

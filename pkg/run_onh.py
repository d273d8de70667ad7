"""
Runner script for the ONH phenotyping pipeline.

Usage:
    python run_onh.py phantom --out data/phantoms --n-per-group 10
    python run_onh.py params --in data/phantoms --out outputs/params.csv
    python run_onh.py cloud --in data/phantoms --out data/clouds
    python run_onh.py train --task normal-mild --data data/clouds --out outputs/models --seed 7
    python run_onh.py eval --model outputs/models/model_normal-mild.onhpn --data data/clouds --out outputs/eval.json
    python run_onh.py criticals --model outputs/models/model_normal-mild.onhpn --data data/clouds --out outputs/criticals
    python run_onh.py stats --params outputs/params.csv --manifest data/phantoms/manifest.json --out outputs/stats
"""

import sys

from src.cli import main


if __name__ == "__main__":
    sys.exit(main())

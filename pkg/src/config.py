"""
Configuration for ONH phenotyping: scan geometry, parameter extraction,
point clouds, PointNet training and report emission.
"""

# Scan Geometry Defaults (Spectralis-style 15 x 10 degree raster)
SCAN_NX = 384  # A-scans per B-scan
SCAN_NY = 97  # B-scans
SCAN_NZ = 496  # pixels per A-scan
SCAN_DX_UM = 11.5  # lateral spacing between A-scans
SCAN_DY_UM = 30.0  # spacing between B-scans
SCAN_DZ_UM = 3.87  # axial resolution

# Severity Thresholds (visual field mean deviation, dB)
MILD_MIN_MD_DB = -6.00
MODERATE_MIN_MD_DB = -12.00

# Frame Fitting
COLLINEAR_EIGEN_RATIO = 1e-12  # smallest scatter eigenvalues vs largest
CIRCLE_FALLBACK_TOL = 1e-9  # relative conic degeneracy before the circle fit

# Parameter Extraction
RING_FACTOR = 1.5  # ring radius in units of BMOR
RING_SAMPLES = 360  # 1 degree steps
PPSA_WINDOW = (1.0, 2.5)  # radial fit window in units of BMOR
PPSA_MIN_POINTS = 3  # per side
AXIAL_NEIGHBOURS = 25  # surface points used for the local quadratic fit on the BMO axis
GSI_MIN_POINTS = 6
GSI_FLAT_CURVATURE = 1e-9  # 1/um, both curvatures below this -> flat LC

# Point Clouds
CLOUD_LATERAL_PITCH_UM = (34.5, 90.0)  # column decimation, about 20,000 points at scan defaults
UNIT_SCALE = 1.0 / 1000.0  # um -> mm for network input
MIN_SAMPLE_N = 64
DEFAULT_SAMPLE_N = 1024

# Tensor Core
BN_MOMENTUM = 0.9
BN_EPSILON = 1e-5

# PointNet Training
GLOBAL_FEATURE_DIM = 256
ADAM_STEP = 1e-3
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
BATCH_SIZE = 16
EPOCHS = 60
DROPOUT_P = 0.3
TNET_REG_WEIGHT = 1e-3
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)  # train, validation, test
CV_FOLDS = 5
MIN_EYES_PER_CLASS = 10

# Classification tasks: name -> (negative group, positive group)
TASKS = {
    "normal-mild": ("NORMAL", "MILD"),
    "mild-moderate": ("MILD", "MODERATE"),
    "moderate-advanced": ("MODERATE", "ADVANCED"),
}

# Critical Points
AVERAGE_GRID_PITCH_UM = 50.0
DENSITY_RADIUS_UM = 75.0
NEURAL_TISSUES = ("RNFL_PLT", "GCL_IPL", "ORL", "RPE_BM")
CONNECTIVE_TISSUES = ("CHOROID", "SCLERA", "LC")

# Statistics
ALPHA = 0.05
FISHER_EXACT_MAX_TOTAL = 200  # r x c enumeration limit (table total)
FISHER_MAX_TABLES = 2_000_000  # enumeration cap before Monte-Carlo
FISHER_MC_TABLES = 100_000
TUKEY_EPSABS = 1e-8

# Output File Names
EFFECTIVE_CONFIG_FILE = "effective_config.json"
RUN_LOG_FILE = "run_log.txt"
MANIFEST_FILE = "manifest.json"

"""Single source of truth for numeric defaults.

Desk-scale values are sized so a full probe run finishes in minutes on a
laptop core; the full-scale values used by the original experiments are kept
alongside in comments. CLI flags override everything here.
"""

# Feature pipeline
PCA_CHANNELS = 16          # full scale: 256
IMAGE_SIZE = 64            # full scale: 512
VARIANCE_FLOOR = 1e-12     # channel standardization guard

# Readout network
MLP_HIDDEN = 256
SH_COEFFS = 16             # degree 0..3
Y00 = 0.2820947918         # DC spherical-harmonic basis constant
QUAT_W_BIAS = 1.0          # raw (0,0,0,0) decodes to the identity rotation
LOG_SCALE_CLAMP = 8.0
BASE_SCALE_FRACTION = 0.01  # base_scale = fraction * scene extent

# Renderer (3DGS-style compositing constants)
ALPHA_CAP = 0.999
ALPHA_SKIP = 1.0 / 255.0
BLUR_FLOOR = 0.3           # added to both 2D covariance diagonals
FOOTPRINT_SIGMA = 3.0      # per-splat rasterization cutoff
NEAR_DEFAULT = 0.01
DEPTH_EPS = 1e-10          # expected-depth denominator floor

# Optimization
WARM_ITERS = 1000
MAIN_ITERS = 2000          # full scale: 7000
LAMBDA_DSSIM = 0.2
LR_WARM_MLP = (1e-2, 1e-4)           # exponential decay over warm_iters
LR_CAMERA = (1e-4, 1e-6, 1000)       # decays over first 1K steps, then holds
LR_POSITION = 1.6e-4                 # multiplied by scene extent, decays x0.01
LR_OPACITY = 2.5e-2
LR_SCALE = 5e-3
LR_ROTATION = 1e-3
LR_SH = 2.5e-3
MLP_LR_RATIO = 0.1         # readout rate = ratio * matching free-bank rate
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
POSE_REFINE_STEPS = 500
BACKGROUND = (0.0, 0.0, 0.0)
TRAIN_DTYPE = "f32"        # probe default; gradient checks always run f64

# Metrics
PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MASK_ALPHA_MIN = 0.5
MASK_DEPTH_TOL = 0.05      # relative depth agreement for validity masks

# Synthetic oracle
SYNTH_GAUSSIANS = 256
SYNTH_TRAIN_VIEWS = 8
SYNTH_TEST_VIEWS = 4
ORBIT_RADIUS = 2.2
ORBIT_ELEVATION_DEG = 20.0
ORBIT_FOV_DEG = 42.0

THREADS_ENV = "SPLATPROBE_THREADS"

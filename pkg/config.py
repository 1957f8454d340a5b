# Configuration settings for the Generative Predictive Control lab
#
# Values here are defaults. A run config file (flat ``key = value``) overrides
# them per run, and a few process-level knobs can come from the environment
# or a ``.env`` file (GPC_WORKERS, GPC_SEED, GPC_LOG_LEVEL).

import os

from dotenv import load_dotenv

load_dotenv()

# ============================================================
# PROCESS SETTINGS
# ============================================================

SEED = int(os.getenv('GPC_SEED', 0))
WORKERS = int(os.getenv('GPC_WORKERS', 1))  # Worker processes for parallel environments
LOG_LEVEL = os.getenv('GPC_LOG_LEVEL', 'INFO')

# ============================================================
# SAMPLING-BASED PREDICTIVE CONTROL
# ============================================================

SIGMA = 0.3  # Proposal std in normalized knot units
WEIGHTING = 'mppi'  # Options: mppi, ps, cem, tsallis
TEMPERATURE = 1.0  # MPPI / Tsallis lambda
NUM_ELITES = 2  # CEM
TSALLIS_R = 1.5

# Domain randomization
RISK = 'average'  # Options: average, worst, cvar
CVAR_BETA = 0.25
NUM_DOMAINS = 1  # 1 = nominal model only (no DR)
DOMAIN_SCALE = 0.2  # Multiplicative spread of randomized parameters

# ============================================================
# FLOW MATCHING POLICY
# ============================================================

HIDDEN_LAYERS = 2
HIDDEN_WIDTH = 64
ACTIVATION = 'swish'  # Options: swish, tanh, relu
LEARNING_RATE = 1e-3
BATCH_SIZE = 128
COSINE_GAMMA = 2.0
ODE_STEP = 0.1  # Euler step for flow integration

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

# ============================================================
# EVALUATION
# ============================================================

EVAL_EPISODES = 100
EVAL_SAMPLES = 128  # Rollouts per step for SPC / GPC+ (GPC+ splits half-and-half)
WARM_START = 1.0  # Warm-start level alpha for direct policy deployment
SUCCESS_WINDOW = 1.0  # Seconds at the end of an episode checked for success
SUCCESS_ANGLE = 0.2  # rad
SUCCESS_RADIUS = 0.1  # m (nav2d)

# ============================================================
# ENVIRONMENT PROFILES
# ============================================================

# Shared timing
PHYSICS_DT = 0.01
CTRL_FREQ = 50

# Per-environment task and training parameters
ENV_PROFILES = {
    'pendulum': {
        'horizon': 0.5,
        'num_knots': 5,
        'num_iterations': 10,
        'num_envs': 128,
        'num_spc_samples': 8,
        'num_policy_samples': 2,
        'episode_length': 4.0,
        'epochs': 10,
    },
    'cartpole': {
        'horizon': 1.0,
        'num_knots': 10,
        'num_iterations': 10,
        'num_envs': 128,
        'num_spc_samples': 8,
        'num_policy_samples': 2,
        'episode_length': 2.0,
        'epochs': 100,
    },
    'double_cartpole': {
        'horizon': 0.8,
        'num_knots': 10,
        'num_iterations': 50,
        'num_envs': 256,
        'num_spc_samples': 16,
        'num_policy_samples': 16,
        'episode_length': 4.0,
        'epochs': 10,
    },
    'nav2d': {
        'horizon': 1.2,
        'num_knots': 6,
        'num_iterations': 10,
        'num_envs': 128,
        'num_spc_samples': 16,
        'num_policy_samples': 4,
        'episode_length': 4.0,
        'epochs': 20,
    },
}

# Nominal physical parameters (SI units)
DOMAIN_DEFAULTS = {
    'pendulum': {
        'mass': 1.0,
        'length': 1.0,
        'damping': 0.1,
        'gain': 1.0,
    },
    'cartpole': {
        'cart_mass': 1.0,
        'pole_mass': 0.1,
        'pole_length': 1.0,
        'damping': 0.01,
        'gain': 1.0,
    },
    'double_cartpole': {
        'cart_mass': 1.0,
        'mass1': 0.1,
        'mass2': 0.1,
        'length1': 0.5,
        'length2': 0.5,
        'damping': 0.01,
        'gain': 1.0,
    },
    'nav2d': {
        'drag': 0.5,
        'gain': 1.0,
    },
}

# Actuator limits (symmetric, per actuator)
ACTUATOR_LIMITS = {
    'pendulum': [5.0],  # N·m; a constant push stalls below upright (5·pi < 2·m·g·l)
    'cartpole': [10.0],  # N
    'double_cartpole': [10.0],  # N
    'nav2d': [2.0, 2.0],  # m/s²
}

# nav2d scene
NAV_START = (-1.0, 0.0)
NAV_GOAL = (1.0, 0.0)
NAV_OBSTACLE_CENTER = (0.0, 0.0)
NAV_OBSTACLE_RADIUS = 0.35

from .config import ExperimentConfig, build_config, load_config, parse_flat
from .main import main
from .pipeline import run_experiment

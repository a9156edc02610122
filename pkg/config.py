import logging
import os

from dotenv import load_dotenv

load_dotenv()


class Config:
    """Base configuration class

    Only settings that cannot change a numeric result are read from the
    environment. Everything that shapes an experiment lives in the experiment
    file (see models/experiment.py).
    """

    # Output settings
    RESULTS_FOLDER = os.environ.get('RESULTS_FOLDER') or os.path.join(os.getcwd(), 'results')
    REPORT_FORMATS = ('csv', 'table', 'jsonl', 'pdf')

    # Execution settings
    DEFAULT_WORKERS = int(os.environ.get('CHURNLAB_WORKERS') or 1)
    TORCH_NUM_THREADS = 1

    # Logging
    LOG_LEVEL = os.environ.get('LOG_LEVEL') or 'INFO'
    LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'

    @classmethod
    def init_app(cls):
        """Initialize the process with this config"""
        import torch

        os.makedirs(cls.RESULTS_FOLDER, exist_ok=True)
        logging.basicConfig(level=cls.LOG_LEVEL, format=cls.LOG_FORMAT)

        # Bitwise reproducibility across runs and worker processes
        torch.set_num_threads(cls.TORCH_NUM_THREADS)
        torch.use_deterministic_algorithms(True)


class DevelopmentConfig(Config):
    """Development configuration"""
    LOG_LEVEL = os.environ.get('LOG_LEVEL') or 'DEBUG'


class ProductionConfig(Config):
    """Long sweeps on a shared machine"""
    LOG_FORMAT = '%(asctime)s %(process)d %(levelname)s %(name)s: %(message)s'

    @classmethod
    def init_app(cls):
        super().init_app()

        # Keep a log file next to the results
        file_handler = logging.FileHandler(os.path.join(cls.RESULTS_FOLDER, 'churnlab.log'))
        file_handler.setLevel(logging.INFO)
        file_handler.setFormatter(logging.Formatter(cls.LOG_FORMAT))
        logging.getLogger().addHandler(file_handler)


class TestingConfig(Config):
    """Testing configuration"""
    LOG_LEVEL = 'WARNING'
    DEFAULT_WORKERS = 1


# Configuration mapping
config = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'testing': TestingConfig,
    'default': Config
}

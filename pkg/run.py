#!/usr/bin/env python3
"""
Churn lab - command-line runner
"""

import os
import sys

from config import config


def create_app():
    """Configure logging, output folders and torch for this process"""

    # Get configuration environment
    config_name = os.environ.get('CHURNLAB_ENV', 'default')
    if config_name not in config:
        config_name = 'default'

    app_config = config[config_name]
    app_config.init_app()
    return app_config


if __name__ == '__main__':
    create_app()

    from app.main import main

    sys.exit(main(sys.argv[1:]))

#!/usr/bin/env python3
"""
Run a surface VEM convergence study from the command line
"""
import logging
import sys

from surfvem.config import get_settings
from surfvem.main import main

logging.basicConfig(
    level=getattr(logging, get_settings().log_level.upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

if __name__ == "__main__":
    sys.exit(main())

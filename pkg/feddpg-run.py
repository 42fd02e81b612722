#!/usr/bin/env python
"""
Entry point script for feddpg
"""
import sys
from feddpg.cli import main

if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3

from rlvr_system.cli import main

if __name__ == "__main__":
    main()

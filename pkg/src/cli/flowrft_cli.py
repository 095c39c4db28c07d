#!/usr/bin/env python3
"""Command line interface for flowrft."""

from flowrft.flowrft import main

if __name__ == "__main__":
    main()

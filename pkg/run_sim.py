#!/usr/bin/env python3
"""
Drone Fleet Simulation Runner
Run this script to simulate the bundled example scenario
"""

import sys

from fleet_cli import main

if __name__ == "__main__":
    print("Starting drone fleet simulation...")
    print("Outputs go to $DRONE_EMS_OUTPUT_DIR (set it in the .env file) or ./results")
    sys.exit(main(sys.argv[1:] or ["run", "example_scenario.conf"]))

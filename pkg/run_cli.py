"""
Launcher for the assembly pose command line.

Generate a dataset, estimate and evaluate:
    python run_cli.py gen --plan configs/stacked_primitives.yaml --dataset out/dataset
    python run_cli.py estimate --plan configs/stacked_primitives.yaml --dataset out/dataset --params configs/params.yaml --out out/run
    python run_cli.py eval --plan configs/stacked_primitives.yaml --dataset out/dataset --out out/run --overlay
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

from assembly_pose.main import main

if __name__ == "__main__":
    sys.exit(main())

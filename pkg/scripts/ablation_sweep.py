"""Head-variant ablation: build-up of the refiner, gate on/off, number of nonlinear layers.

    python3 scripts/ablation_sweep.py --config configs/img8_low_data.yaml --out runs/ablation
"""

import sys

from lowdata.cli import DEFAULT_ABLATION, main

if __name__ == "__main__":
    argv = sys.argv[1:]
    if "--variant" not in argv:
        argv += ["--variant", ",".join(DEFAULT_ABLATION)]
    sys.exit(main(["ablate", *argv]))

"""Refit the audit constants on the calibration seeds and write them to the fixture."""
import argparse
import json

from contrastive_dynamics.lemma_checks import CALIBRATION_SEEDS, CONSTANTS_PATH, SAFETY, calibrate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(CONSTANTS_PATH))
    ap.add_argument("--safety", type=float, default=SAFETY)
    ap.add_argument("--seeds", type=int, nargs="+", default=list(CALIBRATION_SEEDS))
    args = ap.parse_args()
    doc = calibrate(tuple(args.seeds), args.safety)
    with open(args.out, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(doc, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()

"""Regenerate tests/data/golden_lora.amgx, the fixed checkpoint the format tests compare against.

Values are small dyadic rationals so the file is identical on every platform.
"""

import argparse
from pathlib import Path

import numpy as np

from xlmerge import AdapterMeta, AdapterSet, LoraLayer, write_checkpoint


def golden_set() -> AdapterSet:
    B = np.array([[1.0, 0.5], [-2.0, 0.25], [0.0, 3.0]])
    A = np.array([[1.0, 2.0], [-0.5, 4.0]])
    layer = LoraLayer(B, A, scale=2.0)
    meta = AdapterMeta(language="sw", task="ner", base_model="toy-3x2")
    return AdapterSet("lora", {"enc.0.W^Q": layer}, meta)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    default = Path(__file__).resolve().parents[1] / "tests" / "data" / "golden_lora.amgx"
    parser.add_argument("--out", type=Path, default=default)
    args = parser.parse_args()
    write_checkpoint(golden_set(), args.out)
    print(args.out)


if __name__ == "__main__":
    main()

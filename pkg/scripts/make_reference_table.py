"""Write the reference margin table (unstructured global magnitude pruning,
rates 1-16) as a report CSV.

Its robust accuracies are means over 5 seeds x 256 images, so each is a
multiple of 1/1280 shown to two decimals; the exact count is recovered as
round(value * 12.8). Clean accuracies come from a larger test set and are
used as given.

    python3 scripts/make_reference_table.py tests/fixtures/reference_report.csv
"""

import sys
from pathlib import Path

from prunebench.harness import RobustnessReport

METHOD = "unstructured-magnitude-global"
RATES = (1, 2, 4, 8, 16)
SAMPLES = 1280

BENIGN = (85.57, 86.21, 86.58, 86.82, 86.01)
ROBUST = {
    ("bb", 20): (68.05, 70.62, 69.30, 66.56, 62.11),
    ("bb", 70): (47.66, 48.44, 46.17, 38.67, 25.08),
    ("bb", 120): (33.91, 37.19, 33.19, 24.22, 13.44),
    ("bb", 170): (27.66, 31.02, 26.44, 18.28, 10.23),
    ("cw", 10): (61.88, 60.94, 62.42, 61.33, 51.48),
    ("cw", 15): (47.73, 46.41, 48.20, 47.27, 39.06),
    ("cw", 20): (34.45, 34.30, 32.73, 30.86, 23.59),
    ("cw", 25): (21.64, 24.30, 18.75, 14.69, 9.22),
    ("pgd", 0.125 / 255): (74.61, 75.00, 75.23, 74.61, 72.19),
    ("pgd", 0.25 / 255): (68.52, 69.53, 69.53, 67.89, 62.66),
    ("pgd", 0.5 / 255): (55.23, 56.88, 56.25, 52.42, 42.81),
    ("pgd", 1 / 255): (34.77, 37.73, 34.69, 25.78, 15.78),
}

# the reference margins, rows in the order above
MARGINS = {
    "benign": (0.64, 1.01, 1.25, 0.44),
    ("bb", 20): (2.58, 1.25, -1.48, -5.94),
    ("bb", 70): (0.78, -1.48, -8.98, -22.58),
    ("bb", 120): (3.28, 0.00, -9.69, -20.47),
    ("bb", 170): (3.36, -1.33, -9.38, -17.42),
    ("cw", 10): (-0.94, 0.55, -0.55, -10.39),
    ("cw", 15): (-1.33, 0.47, -0.47, -8.67),
    ("cw", 20): (-0.16, -1.72, -3.59, -10.86),
    ("cw", 25): (2.66, -2.89, -6.95, -12.42),
    ("pgd", 0.125 / 255): (0.39, 0.62, 0.00, -2.42),
    ("pgd", 0.25 / 255): (1.02, 1.02, -0.62, -5.86),
    ("pgd", 0.5 / 255): (1.64, 1.02, -2.81, -12.42),
    ("pgd", 1 / 255): (2.50, -0.08, -8.98, -18.98),
}


def build() -> RobustnessReport:
    rep = RobustnessReport(n_samples=SAMPLES)
    for rate, v in zip(RATES, BENIGN):
        rep.clean[(METHOD, rate, 0)] = v / 100
    for (attack, eps), values in ROBUST.items():
        for rate, v in zip(RATES, values):
            rep.robust[(METHOD, rate, 0, attack, eps)] = round(v * SAMPLES / 100) / SAMPLES
    return rep


if __name__ == "__main__":
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "tests/fixtures/reference_report.csv")
    out.write_text(build().to_csv())
    print(f"wrote {out}")

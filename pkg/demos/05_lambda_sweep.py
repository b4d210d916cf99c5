"""Loss along the interpolation path, under two trained models.

Trains one model with plain random mixing and one with the adversarial
step, then scores convex combinations of paired test sentences at 41
coefficients. A flatter, lower curve means the model tolerates
interpolated inputs better. Writes sweep.csv and sweep.svg next to
this script's working directory.
"""

import dataclasses
from pathlib import Path

import numpy as np

from admix import cli
from admix import harness as hz

CONFIG_FILE = Path(__file__).resolve().parents[1] / "configs" / "acceptance.cfg"


def main() -> None:
    cfg = hz.load_config(CONFIG_FILE)
    model_amp, _ = hz.train(cfg, seed=0)
    model_mix, _ = hz.train(dataclasses.replace(cfg, policy="mixup"), seed=0)
    _, _, test_ds, vocab = hz.prepare_task(cfg, seed=0)

    rows = hz.lambda_sweep(model_amp, model_mix, test_ds, vocab, cfg.max_len, grid_points=41)
    col_a = np.array([r[1] for r in rows])
    col_b = np.array([r[2] for r in rows])
    print(f"mean sweep loss: adversarial {col_a.mean():.4f}, random-mix {col_b.mean():.4f}")

    lo = min(col_a.min(), col_b.min())
    hi = max(col_a.max(), col_b.max())
    print("\n  lam   adversarial curve ('a') vs random-mix curve ('b')")
    for lam, a, b in rows[::4]:
        pos_a = int(round(40 * (a - lo) / (hi - lo)))
        pos_b = int(round(40 * (b - lo) / (hi - lo)))
        line = [" "] * 42
        line[pos_b] = "b"
        line[pos_a] = "a" if pos_a != pos_b else "*"
        print(f"  {lam:4.2f}  |{''.join(line)}|")

    cli._write_csv("sweep.csv", cli.SWEEP_HEADER, rows)
    cli.render_sweep_svg(rows, "sweep.svg")
    print("\nwrote sweep.csv and sweep.svg")


if __name__ == "__main__":
    main()

"""Train a small residual U-Net ensemble on synthetic cracks and print a results table.

Run with ``python3 demos/ensemble_on_synthetic.py``. On one CPU core it
takes under two minutes; raise SIZE, N or EPOCHS for a closer analog.
"""

from crackseg.architectures import EnsembleConfig, ResUNetConfig
from crackseg.data import gen_synthetic, split
from crackseg.metrics import evaluate, format_table
from crackseg.training import TrainConfig, train_ensemble_two_stage

SIZE, N, EPOCHS = 32, 32, 15
KERNELS = (3, 5, 7, 9)

train, val, test = split(gen_synthetic(N, SIZE, seed=0), (0.75, 0.125, 0.125), seed=0)
print(f"{len(train)} train / {len(val)} val / {len(test)} test images of {SIZE}x{SIZE}")

reports = {}


def report_base(i, model, hist):
    reports[f"Residual Unet {i + 1} (k={KERNELS[i]})"] = evaluate(model, test)
    print(f"base {i + 1}: final train loss {hist.train_loss[-1]:.4f}")


ensemble, histories = train_ensemble_two_stage(
    [ResUNetConfig(kernel_size=k, depth=2, base_filters=8) for k in KERNELS],
    train, val,
    TrainConfig(batch_size=4, epochs=EPOCHS, learning_rate=1e-3, seed=0),
    TrainConfig(batch_size=4, epochs=EPOCHS, learning_rate=3e-3, seed=0),
    EnsembleConfig(KERNELS),
    on_base_trained=report_base,
)
reports["Ensemble"] = evaluate(ensemble, test)
print()
print(format_table(reports))

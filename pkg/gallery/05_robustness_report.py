"""End-to-end: train, attack, defend, re-attack, and export the report."""
import tempfile
from pathlib import Path

from advrobust import SynthSpec, TrainConfig, load_split, run_pipeline
from advrobust.report import export_report, format_table

spec = SynthSpec(n_train=2000, n_test=1000, size=16, classes=4, separation=2.0, seed=0)
train = load_split("synth", None, "train", synth=spec)
test = load_split("synth", None, "test", synth=spec)

result = run_pipeline(train, test, TrainConfig(epochs=15, batch_size=32), epsilon=0.1,
                      eval_epsilons=(0.05, 0.2))
reports = [result.report] + result.extra_reports
print(format_table(reports))

out = Path(tempfile.mkdtemp()) / "robustness.csv"
export_report(reports, "csv", out)
print()
print(out.read_text())

"""Train a small C3D-LSTM on synthetic dives and print the clip-by-clip feedback for a flawed dive.

Run with ``python demos/score_evolution.py``; takes about a minute on one CPU.
"""

from aqa import feedback
from aqa.pipelines import PipelineConfig, fit_pipeline
from aqa.synthbench import generate_dataset

data = generate_dataset(120, "dive", split=(100, 20), seed=0)
config = PipelineConfig(name="c3d-lstm", mode="final", iterations=3000, learning_rate=0.05)
model = fit_pipeline(data, data.split[0], config, seed=0)

flawed = next(i for i in data.split[1] if data.specs[i].defects)
print("injected defects (clip, deduction):", data.specs[flawed].defects)
print("true execution:", data.labels[flawed].execution)
print(feedback.detect_errors(model.evolution(data, flawed), "exec", flawed).to_text())

"""Train the arrhythmia classifier from scratch on a small synthetic dataset.

The class table is scaled down so the run takes seconds; the full protocol
uses the same calls with the real table and 100 epochs.
"""

import warnings

import numpy as np

from ecgforge import dataset as D
from ecgforge import training
from ecgforge.synthetic import synthetic_database

with warnings.catch_warnings():
    warnings.simplefilter("ignore")  # short synthetic records miss a few classes
    sources = D.sources_from_records(synthetic_database(6, 60.0, rng=0))

table = D.load_class_table().scaled((2, 1, 1))
bundle = D.build_ds1_ds2(sources, table, 0)
print("split sizes:", {s: len(bundle.split(s)) for s in ("train", "val", "test")})

config = training.TrainConfig(task="classification", epochs=5, batch_size=17, seed=0)
result = training.train_classification(bundle.split("train"), bundle.split("val"), config)
for epoch, (tr, va) in enumerate(zip(result.train_loss, result.val_loss)):
    print(f"epoch {epoch}: train {tr:.3f}  val {va:.3f}")

report = training.evaluate_classifier(training.load_best(result), bundle.split("test"))
print(f"test ov acc {report['overall_accuracy']:.1f}%  bal acc {report['balanced_accuracy']:.1f}%  "
      f"kappa {report['kappa']:.3f}")
confusion = np.array(report["confusion"])
print("correct per class:", np.diag(confusion).tolist(), "of", confusion.sum(axis=1).tolist())

"""Small Per-SSFL run on the synthetic image set, end to end in about a minute.

    python demos/quickstart.py [out_dir]
"""
import json
import sys

from ssfl.cli import ExperimentConfig, run_experiment

cfg = ExperimentConfig(train_size=1000, test_size=500, num_clients=4, clients_per_round=4,
                       widths="8,16,32,64", proj_dim=64, proj_hidden=128, crop_min=0.5,
                       method="per", lam=0.1, rounds=5, eval_every=1, knn_k=50,
                       probe_epochs=20, probe_rounds=10)
out = sys.argv[1] if len(sys.argv) > 1 else "runs/quickstart"
art = run_experiment(cfg.validate(), out)

for m in art.result.metrics:
    print(f"round {m.round}: loss {m.mean_train_loss:.3f}  personal KNN {m.knn_accuracy:.3f}")
print(json.dumps({k: round(v["mean_accuracy"], 3) for k, v in art.probes.items()}, indent=1))
print(f"artifacts in {art.out_dir}")

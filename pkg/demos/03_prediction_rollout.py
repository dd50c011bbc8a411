"""Two-stage prediction and long rollouts through the command line.

Everything runs from a throwaway directory with a deliberately tiny
configuration, so the models are barely trained. The point is the plumbing:
checkpoints, seeded reproducibility, segment tags and exports.
"""
import json
import tempfile
from pathlib import Path

from motionbridge.cli import run_cli
from motionbridge.data import read_sequences

work = Path(tempfile.mkdtemp(prefix="motionbridge-demo-"))
cfg = {
    "out_dir": str(work),
    "data": {"per_action": 4, "test_per_action": 2, "n_frames": 50},
    "vae": {"t_between": [10], "d": 16, "d_z": 8, "heads": 2, "layers": 1, "epochs": 3},
    "mdm": {"steps": 30, "d": 16, "heads": 2, "layers": 1, "T": 50, "t_frames": 20},
    "sampler": {"epochs": 2, "n_branches": 3},
    "classifier": {"epochs": 3, "d": 16, "layers": 1},
    "predict": {"T_b": 10, "history_frames": 20},
}
config = work / "config.json"
config.write_text(json.dumps(cfg))
common = ["--config", str(config), "--seed", "0"]

for step in ("gen-data", "train-vae", "train-mdm", "train-sampler", "train-classifier"):
    assert run_cli([step] + common) == 0, step

print("\n-- predict: Wave after a walk, bridged by Walk, three samples")
run_cli(["predict", "--future", "Wave", "--inbetween", "Walk", "--S", "3", "--use-sampler",
         "--out-dir", str(work / "pred"), "--format", "csv"] + common)
manifest = json.loads((work / "pred" / "manifest.json").read_text())
for entry in manifest["files"]:
    seq = read_sequences(entry["sequence"])[0]
    tags = ", ".join(f"{s['tag']}[{s['start']}:{s['stop']}]" for s in seq.meta["segments"])
    print(f"  {seq.id}: {len(seq)} frames  {tags}")
print("  files:", sorted(p.name for p in (work / "pred").iterdir()))

print("\n-- rollout over three label pairs")
run_cli(["rollout", "--pairs", "Wave:Walk,Reach:Jog,SitDown:Step", "--out-dir", str(work / "roll")] + common)
roll = read_sequences(json.loads((work / "roll" / "manifest.json").read_text())["files"][0]["sequence"])[0]
print(f"  {len(roll)} frames:", " | ".join(f"{s['tag']} {s['stop'] - s['start']}" for s in roll.meta["segments"]))

print("\n-- evaluation (printed by the command, also saved to metrics.json)")
preds = [e["sequence"] for e in manifest["files"]]
run_cli(["eval", *[a for p in preds for a in ("--pred", p)], "--out", str(work / "metrics.json")] + common)
print("\nartifacts left in", work)

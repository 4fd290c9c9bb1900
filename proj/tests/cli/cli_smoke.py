"""End-to-end checks of the sk command line on a tiny configuration."""
import json
import os
import subprocess
import sys
import tempfile

SK = sys.argv[1]

TINY = {
    "name": "cli-tiny",
    "dataset": {"num_classes": 2, "per_class": 16, "test_per_class": 8, "shape": [1, 8, 8],
                "seed": 3, "test_seed": 4, "noise_sigma": 0.2},
    "surrogate": {"train": {"epochs": 2, "batch_size": 16}},
    "victims": [{"train": {"epochs": 1, "batch_size": 16}}],
    "pairs": [[0, 1]],
    "trigger": {"steps": 3, "max_samples": 8},
    "poison": {"budget": 2, "steps": 3, "attacker_samples": 8},
    "seeds": [0],
}


def sk(*args, expect=0):
    proc = subprocess.run([SK, *args], capture_output=True, text=True)
    if proc.returncode != expect:
        sys.exit(f"sk {' '.join(args)}: exit {proc.returncode}, wanted {expect}\n{proc.stdout}\n{proc.stderr}")
    return proc.stdout


def main():
    with tempfile.TemporaryDirectory() as tmp:
        cfg = os.path.join(tmp, "tiny.json")
        with open(cfg, "w") as f:
            json.dump(TINY, f)
        trig = os.path.join(tmp, "trigger.skt")
        out = json.loads(sk("craft-trigger", "--config", cfg, "--out", trig))
        assert out["source"] == 0 and out["target"] == 1, out
        assert 0.0 <= out["surrogate_fooling_rate"] <= 1.0

        poisoned = os.path.join(tmp, "poisoned")
        out = json.loads(sk("craft-poison", "--config", cfg, "--trigger", trig, "--out", poisoned))
        assert out["budget"] == 2, out
        with open(os.path.join(poisoned, "poison_manifest.json")) as f:
            assert len(json.load(f)["indices"]) == 2

        model = os.path.join(tmp, "model.skmd")
        os.environ["SK_DATA_DIR"] = tmp
        out = json.loads(sk("train", "--data", "poisoned", "--arch", "mlp-s",
                            "--params", '{"epochs": 1, "batch_size": 8}', "--out", model))
        assert os.path.exists(model), out
        out = json.loads(sk("eval", "--config", cfg, "--model", model, "--trigger", trig,
                            "--source", "0", "--target", "1"))
        assert out["n_success"] + out["n_other_class"] + out["n_still_source"] == out["n_total"], out

        run_dir = os.path.join(tmp, "run")
        md = sk("run", "--config", cfg, "--out", run_dir, "--jobs", "2")
        assert "| attack |" in md and "| no_poison |" in md, md
        report = os.path.join(run_dir, "report.json")
        assert sk("report", "--in", report, "--format", "markdown") == md
        json.loads(sk("report", "--in", report, "--format", "json"))

        md = sk("defend", "--kind", "mixup", "--config", cfg, "--out", os.path.join(tmp, "def"))
        assert "| mixup |" in md, md

        bad = os.path.join(tmp, "bad.json")
        with open(bad, "w") as f:
            json.dump({"unknown": 1}, f)
        sk("run", "--config", bad, "--out", run_dir, expect=1)
        sk("run", "--config", os.path.join(tmp, "missing.json"), expect=1)
        sk("defend", "--kind", "magic", "--config", cfg, expect=1)
        sk("eval", "--model", model, "--trigger", trig, "--source", "0", "--target", "7",
           "--config", cfg, expect=1)
        sk("report", "--in", report, "--format", "html", expect=1)
    print("cli smoke: ok")


if __name__ == "__main__":
    main()

"""convert -> train -> generate -> evaluate in one go, through the lobbyte CLI.

    python scripts/pipeline.py tests/fixtures/mbo_session.csv /tmp/lobbyte-run

Every stage writes its own run manifest. With a fixed --seed, two runs produce
byte-identical corpus, checkpoint, generated stream and metrics files.
"""
import argparse
import sys
from pathlib import Path

from lobbyte.cli import main as lobbyte

MODEL_CFG = "preset = {preset}\n"
TRAIN_CFG = """\
batch_size = 4
warmup_steps = 20
min_len_bytes = 128
max_len_bytes = 256
checkpoint_every = {steps}
"""


def run_pipeline(csv_path, work, seed=0, steps=200, n_events=400, preset="micro"):
    work = Path(work)
    work.mkdir(parents=True, exist_ok=True)
    (work / "model.cfg").write_text(MODEL_CFG.format(preset=preset))
    (work / "train.cfg").write_text(TRAIN_CFG.format(steps=steps))
    paths = dict(corpus=work / "corpus.lobb", run=work / "run", gen=work / "generated.lobb",
                 report=work / "report")
    stages = [
        ["convert", "--in", csv_path, "--out", paths["corpus"]],
        ["train", "--data", paths["corpus"], "--out", paths["run"], "--model-config", work / "model.cfg",
         "--train-config", work / "train.cfg", "--steps", steps, "--seed", seed, "--print-every", steps],
        ["generate", "--ckpt", paths["run"], "--n", n_events, "--seed", seed, "--out", paths["gen"]],
        ["evaluate", "--gen", paths["gen"], "--ref", paths["corpus"], "--out", paths["report"]],
    ]
    for argv in stages:
        code = lobbyte([str(a) for a in argv])
        if code != 0:
            raise RuntimeError(f"stage {argv[0]} exited with {code}")
    return paths


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("csv")
    p.add_argument("work")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--n-events", type=int, default=400)
    p.add_argument("--preset", default="micro")
    a = p.parse_args(argv)
    run_pipeline(a.csv, a.work, a.seed, a.steps, a.n_events, a.preset)
    return 0


if __name__ == "__main__":
    sys.exit(main())

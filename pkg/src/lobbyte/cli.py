"""Command-line entry point: convert, synth, train, generate, evaluate, inspect.

Exit codes: 0 success, 1 runtime failure, 2 usage or input error.
Log verbosity comes from the LOBBYTE_LOG environment variable (default WARNING).
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("lobbyte")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# config files -----------------------------------------------------------------------

def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment. Values are JSON when they parse as JSON."""
    out = {}
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {i}: expected key = value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def read_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    return parse_config_text(p.read_text())


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _split(cfg: dict, cls, what: str, extra: set[str] = frozenset()) -> dict:
    bad = set(cfg) - _fields(cls) - set(extra)
    if bad:
        raise UsageError(f"unknown {what} keys: {sorted(bad)}")
    return {k: v for k, v in cfg.items() if k in _fields(cls)}


# manifest ---------------------------------------------------------------------------

def sha256_file(path) -> str | None:
    p = Path(path)
    if not p.is_file():
        return None
    h = hashlib.sha256()
    with open(p, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclasses.dataclass
class RunManifest:
    subcommand: str
    config: dict
    inputs: dict
    outputs: dict
    seed: int | None
    argv: list
    cwd: str = dataclasses.field(default_factory=os.getcwd)
    checksums: dict = dataclasses.field(default_factory=dict)
    wall_clock_s: float = 0.0
    exit_code: int = 0
    version: str = __version__

    def finalize(self, t0: float, code: int):
        self.wall_clock_s = time.perf_counter() - t0
        self.exit_code = code
        for k, p in {**self.inputs, **self.outputs}.items():
            if p is not None and Path(p).is_file():
                self.checksums[str(p)] = sha256_file(p)

    def to_json(self, indent=1) -> str:
        return json.dumps(dataclasses.asdict(self), indent=indent, sort_keys=True, default=str)


def _jsonable(d: dict) -> dict:
    return json.loads(json.dumps(d, default=lambda o: list(o) if isinstance(o, tuple) else str(o)))


# subcommands ------------------------------------------------------------------------

def cmd_convert(a, m: RunManifest):
    from .ingest import MalformedRow, convert_stream, iter_mbo_file, write_packed_file

    src = Path(a.input)
    if not src.is_file():
        raise UsageError(f"input file not found: {src}")
    m.inputs["in"] = str(src)
    m.outputs["out"] = str(a.out)
    m.config.update(delimiter=a.delimiter, max_bad_rows=a.max_bad_rows)
    bad: list = []
    records = iter_mbo_file(src, delimiter=a.delimiter, max_bad_rows=a.max_bad_rows, bad_rows=bad)
    events, stats = convert_stream(records)
    try:
        header = write_packed_file(a.out, list(events))
    except MalformedRow as e:
        raise UsageError(f"too many malformed rows (threshold {a.max_bad_rows}); last: {e}")
    for k, v in stats.as_dict().items():
        print(f"{k}={v}")
    print(f"malformed_rows={len(bad)}")
    print(f"events_written={header.event_count}")
    m.config["stats"] = stats.as_dict()


def cmd_synth(a, m: RunManifest):
    from .ingest import SyntheticConfig, synth_generate, write_packed_file

    raw = read_config(a.config)
    preset = a.preset if a.preset is not None else raw.get("preset")
    raw.pop("preset", None)
    if preset not in (None, "table1"):
        raise UsageError(f"unknown synth preset {preset!r} (available: table1)")
    cfg = _split(raw, SyntheticConfig, "synth config")
    if a.seed is not None:
        cfg["seed"] = a.seed
    if a.n_events is not None:
        cfg["n_events"] = a.n_events
    sc = SyntheticConfig.table1(**cfg) if preset == "table1" else SyntheticConfig(**cfg)
    sc.validate()
    stream = synth_generate(sc)
    write_packed_file(a.out, stream)
    m.config.update(dataclasses.asdict(sc))
    m.seed = sc.seed
    m.outputs["out"] = str(a.out)
    from .evaluation import event_type_frequencies
    print(f"events={len(stream)}")
    print(f"duration_s={stream.meta['duration_s']:.6f}")
    for k, v in event_type_frequencies(stream).items():
        print(f"frequency_{k}={v:.6f}")


def _model_config(path, seed):
    from .model.config import ModelConfig, preset

    raw = read_config(path)
    name = raw.pop("preset", "tiny")
    _split(raw, ModelConfig, "model config")
    if seed is not None:
        raw["seed"] = seed
    try:
        return preset(name, **raw)
    except KeyError as e:
        raise UsageError(str(e))


def cmd_train(a, m: RunManifest):
    import torch

    from .dataset import Corpus, Sampler, SamplerConfig
    from .model import build_model
    from .model.checkpoint import ConfigMismatch
    from .training import TrainConfig, train_loop

    if not Path(a.data).is_file():
        raise UsageError(f"data file not found: {a.data}")
    # --seed overrides the seeds in both config files
    mcfg = _model_config(a.model_config, a.seed)
    raw = read_config(a.train_config)
    sampler_keys = {"min_len_bytes", "max_len_bytes"}
    tkw = _split(raw, TrainConfig, "train config", sampler_keys | {"preset"})
    seed = tkw["seed"] = a.seed if a.seed is not None else tkw.get("seed", 0)
    if a.steps is not None:
        tkw["total_steps"] = a.steps
        tkw.setdefault("warmup_steps", min(TrainConfig.desk().warmup_steps, a.steps))
    tcfg = TrainConfig.desk(**tkw) if raw.get("preset", "desk") == "desk" else TrainConfig(**tkw)
    desk = SamplerConfig.desk()
    scfg = SamplerConfig(min_len_bytes=raw.get("min_len_bytes", desk.min_len_bytes),
                         max_len_bytes=raw.get("max_len_bytes", desk.max_len_bytes), seed=seed)
    torch.set_num_threads(max(1, a.threads))
    corpus = Corpus.open(a.data)
    sampler = Sampler(corpus, scfg)
    model = build_model(mcfg)
    out = Path(a.out)
    m.inputs["data"] = str(a.data)
    if a.resume:
        m.inputs["resume"] = str(a.resume)
    m.outputs.update(out_dir=str(out), last=str(out / "last.ckpt"), metrics=str(out / "metrics.jsonl"))
    m.config.update(model=mcfg.to_dict(), train=tcfg.to_dict(), sampler=dataclasses.asdict(scfg))
    m.seed = seed

    def progress(r):
        if r["step"] % max(1, a.print_every) == 0:
            print(f"step={r['step']} ce={r['ce']:.4f} lr={r['lr']:.3g} "
                  f"ratios={[round(x, 3) for x in r['realized_ratios']]}", flush=True)

    try:
        state, recs = train_loop(tcfg, sampler, model, out_dir=out, resume=a.resume, log=progress)
    except ConfigMismatch as e:
        raise UsageError(str(e))
    if recs:
        print(f"final_step={state.step} ce={recs[-1]['ce']:.4f}")


def cmd_generate(a, m: RunManifest):
    from .generation import GenConfig, generate_stream, write_summary
    from .ingest import load_stream, write_packed_file
    from .model.checkpoint import CheckpointError, load_model

    ck = Path(a.ckpt)
    if ck.is_dir():
        ck = ck / "last.ckpt"
    if not ck.is_file():
        raise UsageError(f"checkpoint not found: {ck}")
    try:
        model, _ = load_model(ck)
    except CheckpointError as e:
        raise UsageError(str(e))
    prompt = None
    if a.prompt:
        if not Path(a.prompt).is_file():
            raise UsageError(f"prompt file not found: {a.prompt}")
        ev = load_stream(a.prompt).events[: a.prompt_events]
        prompt = ev.tobytes()
        m.inputs["prompt"] = str(a.prompt)
    seed = a.seed if a.seed is not None else 0
    cfg = GenConfig(temperature=a.temperature, max_events=a.n, retry_limit=a.retry_limit, seed=seed,
                    prompt=prompt, drop_invalid=a.drop_invalid)
    res = generate_stream(model, cfg)
    write_packed_file(a.out, res.events)
    summary = Path(str(a.out) + ".summary.json")
    write_summary(summary, res)
    m.inputs["ckpt"] = str(ck)
    m.outputs.update(out=str(a.out), summary=str(summary))
    m.config.update(cfg.summary_dict())
    m.seed = seed
    for k, v in res.summary().items():
        print(f"{k}={v}")


def cmd_evaluate(a, m: RunManifest):
    from .evaluation import build_report, compare_streams, write_report
    from .ingest import load_stream

    for p in (a.gen, a.ref):
        if p is not None and not Path(p).is_file():
            raise UsageError(f"input file not found: {p}")
    gen = load_stream(a.gen)
    m.inputs["gen"] = str(a.gen)
    if a.ref is not None:
        m.inputs["ref"] = str(a.ref)
        rep = compare_streams(gen, load_stream(a.ref), ofi_window=a.ofi_window, price_source=a.price_source)
        headline = rep.generated
    else:
        rep = build_report(gen, ofi_window=a.ofi_window, price_source=a.price_source)
        headline = rep
    files = write_report(a.out, rep)
    m.outputs["out_dir"] = str(a.out)
    m.config.update(ofi_window=a.ofi_window, price_source=a.price_source)
    from .evaluation.report import HEADLINE
    for k, (name, units) in HEADLINE.items():
        v = getattr(headline, k)
        print(f"{name}: {'absent' if v is None else f'{v:.6g}'}")
    print(f"files={len(files)}")


def cmd_inspect(a, m: RunManifest):
    from .codec import EVENT_SIZE, from_packed
    from .ingest import read_packed_file

    if not Path(a.input).is_file():
        raise UsageError(f"input file not found: {a.input}")
    m.inputs["in"] = str(a.input)
    header, events = read_packed_file(a.input)
    print(f"magic={header.magic.decode()} version={header.version} events={header.event_count}")
    for i, ev in enumerate(events):
        if i >= a.head:
            break
        if a.hex:
            b = ev.to_bytes()
            print(f"{i:6d}  " + " ".join(b[j:j + 8].hex() for j in range(0, EVENT_SIZE, 8)))
        else:
            d = from_packed(ev)
            fl = "".join(c for c, on in zip("XLBS", (d.flags.exch, d.flags.local, d.flags.buy, d.flags.sell)) if on)
            print(f"{i:6d}  id={d.order_id:<10d} {d.event_type.name:<10s} flags={fl or '-':<4s} "
                  f"ts={d.exch_ts} price={d.price!r} qty={d.quantity!r}")


def cmd_rerun(a, m: RunManifest):
    """Re-execute a recorded run and compare output checksums with the recorded ones."""
    src = Path(a.manifest_file)
    if not src.is_file():
        raise UsageError(f"manifest not found: {src}")
    try:
        old = json.loads(src.read_text())
        argv, cwd = list(old["argv"]), old.get("cwd", os.getcwd())
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise UsageError(f"{src}: not a run manifest ({e})")
    if argv and argv[0] == "rerun":
        raise UsageError("refusing to rerun a rerun manifest")
    m.inputs["manifest"] = str(src)
    prev = os.getcwd()
    os.chdir(cwd)
    try:
        code = main(argv + ["--manifest", os.devnull])
        outs = [p for p in old.get("outputs", {}).values() if p and Path(p).is_file()]
        now = {p: sha256_file(p) for p in outs}
    finally:
        os.chdir(prev)
    if code != old.get("exit_code", 0):
        raise RuntimeError(f"exit code {code} differs from recorded {old.get('exit_code')}")
    recorded = old.get("checksums", {})
    diff = [p for p, h in now.items() if recorded.get(p) not in (None, h)]
    for p, h in now.items():
        print(f"{'match' if p not in diff else 'DIFFERS'} {p}")
    if diff:
        raise RuntimeError(f"{len(diff)} output(s) differ from the recorded run")


# wiring -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lobbyte", description="Byte-level order book event modeling.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="cmd", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--manifest", help="where to write the run manifest (default: next to the output)")
        return sp

    c = add("convert", "Convert a delimited MBO text file to a .lobb packed file.")
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--delimiter", default=",")
    c.add_argument("--max-bad-rows", type=int, default=0)

    s = add("synth", "Generate a synthetic event stream.")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--n-events", type=int)
    s.add_argument("--preset", choices=["table1"], help="event-type proportions preset")

    t = add("train", "Train a model on a .lobb corpus.")
    t.add_argument("--data", required=True)
    t.add_argument("--model-config")
    t.add_argument("--train-config")
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int, help="override total_steps")
    t.add_argument("--threads", type=int, default=1)
    t.add_argument("--print-every", type=int, default=100)

    g = add("generate", "Generate events from a trained checkpoint.")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.add_argument("--prompt")
    g.add_argument("--prompt-events", type=int, default=8)
    g.add_argument("--temperature", type=float, default=1.0)
    g.add_argument("--retry-limit", type=int, default=3)
    g.add_argument("--drop-invalid", action="store_true")

    e = add("evaluate", "Compute market-quality metrics, optionally against a reference stream.")
    e.add_argument("--gen", required=True)
    e.add_argument("--ref")
    e.add_argument("--out", required=True)
    e.add_argument("--ofi-window", type=int, default=100)
    e.add_argument("--price-source", choices=["event", "mid"], default="event",
                   help="price series for returns: event prices or replayed mid-prices")

    i = add("inspect", "Decode and print events from a .lobb file.")
    i.add_argument("--in", dest="input", required=True)
    i.add_argument("--head", type=int, default=10)
    i.add_argument("--hex", action="store_true")

    r = add("rerun", "Re-execute a run from its manifest and verify output checksums.")
    r.add_argument("manifest_file")
    return p


COMMANDS = {"convert": cmd_convert, "synth": cmd_synth, "train": cmd_train,
            "generate": cmd_generate, "evaluate": cmd_evaluate, "inspect": cmd_inspect, "rerun": cmd_rerun}


def _manifest_path(a, m: RunManifest):
    if a.manifest:
        return Path(a.manifest)
    out = m.outputs.get("out_dir") or m.outputs.get("out")
    if out is None:
        return None
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else Path(str(out) + ".manifest.json")


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("LOBBYTE_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        a = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    m = RunManifest(a.cmd, {}, {}, {}, getattr(a, "seed", None), argv)
    t0 = time.perf_counter()
    code = EXIT_OK
    from .codec import WrongLength
    from .ingest import BadMagic, InvalidConfig, IoFailure, TruncatedPayload, VersionUnsupported
    try:
        COMMANDS[a.cmd](a, m)
    except (UsageError, BadMagic, VersionUnsupported, TruncatedPayload, WrongLength, InvalidConfig,
            FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        code = EXIT_USAGE
    except (IoFailure, Exception) as e:  # noqa: BLE001 - report any runtime failure with exit 1
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        code = EXIT_FAIL
    m.config = _jsonable(m.config)
    m.finalize(t0, code)
    path = _manifest_path(a, m)
    try:
        if path is not None and path.parent.is_dir():
            if str(path) != os.devnull:
                path.write_text(m.to_json() + "\n")
        else:
            # commands without an output file report the manifest on one stderr line
            print("manifest: " + m.to_json(indent=None), file=sys.stderr)
    except OSError as e:
        print(f"warning: could not write manifest: {e}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())

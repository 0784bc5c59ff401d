import json
import math

import numpy as np
import pytest
import torch

from lobbyte.dataset import Sampler, SamplerConfig, SequenceSample, build_batch
from lobbyte.ingest import SyntheticConfig, synth_generate
from lobbyte.model import build_model, preset
from lobbyte.model.checkpoint import CheckpointError, ConfigMismatch, load_model, save_model
from lobbyte.training import (UNIFORM_CE, NonFiniteLoss, ShapeMismatch, TrainConfig, clip_grad_norm,
                              load_train_state, lr_schedule, make_optimizer, new_state,
                              save_train_state, total_loss, train_loop, train_step)


@pytest.fixture(scope="module")
def stream():
    return synth_generate(SyntheticConfig(seed=1, n_events=3000))


def small_sampler(data, seed=0):
    return Sampler(data, SamplerConfig(min_len_bytes=128, max_len_bytes=256, seed=seed))


def small_cfg(**kw):
    d = dict(total_steps=40, warmup_steps=5, batch_size=2, lr=1e-3, checkpoint_every=10)
    d.update(kw)
    return TrainConfig(**d)


def test_defaults():
    c = TrainConfig()
    assert (c.lr, c.warmup_steps, c.total_steps, c.batch_size) == (3e-4, 1000, 10000, 16)
    assert (c.grad_clip, c.ratio_weight, c.betas) == (1.0, 0.01, (0.9, 0.95))
    for kw in [dict(lr=0), dict(warmup_steps=20000), dict(grad_clip=0), dict(ratio_weight=-1)]:
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def test_uniform_logits_give_ln256():
    m = build_model(preset("micro"))
    out = m(torch.arange(64) % 256)
    logits = torch.zeros(64, 256)
    loss = total_loss(logits, torch.randint(0, 256, (64,)), out.decisions, 0.01, m.cfg.ratio_targets)
    assert loss.cross_entropy.item() == pytest.approx(math.log(256), abs=1e-6)
    assert UNIFORM_CE == math.log(256)


def test_zero_lambda_total_is_ce():
    m = build_model(preset("micro"))
    x = torch.randint(0, 256, (50,))
    out = m(x)
    loss = total_loss(out.logits, x, out.decisions, 0.0, m.cfg.ratio_targets)
    assert torch.equal(loss.total, loss.cross_entropy)
    loss = total_loss(out.logits, x, out.decisions, 0.01, m.cfg.ratio_targets)
    expect = loss.cross_entropy + 0.01 * sum(loss.ratio_per_stage)
    assert loss.total.item() == pytest.approx(expect.item(), abs=1e-7)


def test_shape_checks():
    m = build_model(preset("micro"))
    out = m(torch.zeros(10, dtype=torch.long))
    with pytest.raises(ShapeMismatch):
        total_loss(out.logits, torch.zeros(9, dtype=torch.long), out.decisions, 0.01, [4.0, 4.0])
    with pytest.raises(ShapeMismatch):
        total_loss(out.logits[:, :10], torch.zeros(10, dtype=torch.long), out.decisions, 0.01, [4.0, 4.0])
    with pytest.raises(ShapeMismatch):
        total_loss(out.logits, torch.zeros(10, dtype=torch.long), out.decisions, 0.01, [4.0])


def test_lr_schedule_examples():
    c = TrainConfig()
    assert lr_schedule(0, c) == 0.0
    assert lr_schedule(500, c) == pytest.approx(1.5e-4)
    assert lr_schedule(1000, c) == pytest.approx(3e-4)
    assert lr_schedule(5500, c) == pytest.approx(1.5e-4)
    assert lr_schedule(10000, c) == pytest.approx(0.0, abs=1e-18)
    lrs = [lr_schedule(s, c) for s in range(1000, 10001, 50)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_clip_examples():
    p = torch.nn.Parameter(torch.zeros(4))
    q = torch.nn.Parameter(torch.zeros(3))
    p.grad = torch.tensor([3.0, 0, 0, 0])
    q.grad = torch.tensor([0.0, 4.0, 0])
    assert clip_grad_norm([p, q], 1.0) == pytest.approx(5.0)
    total = torch.sqrt(p.grad.double().pow(2).sum() + q.grad.double().pow(2).sum()).item()
    assert abs(total - 1.0) <= 1e-6  # float32 grads
    p.grad = torch.tensor([0.3, 0, 0, 0])
    q.grad = None
    assert clip_grad_norm([p, q], 1.0) == pytest.approx(0.3)
    assert p.grad[0].item() == pytest.approx(0.3)


def test_clip_float64_exact():
    p = torch.nn.Parameter(torch.zeros(50, dtype=torch.float64))
    p.grad = torch.randn(50, dtype=torch.float64) * 10
    clip_grad_norm([p], 1.0)
    assert abs(p.grad.norm().item() - 1.0) <= 1e-9


def test_zero_grads_only_weight_decay():
    m = build_model(preset("micro"))
    cfg = TrainConfig(lr=1e-2, weight_decay=0.1)
    opt = make_optimizer(m, cfg)
    before = {n: p.detach().clone() for n, p in m.named_parameters()}
    for p in m.parameters():
        p.grad = torch.zeros_like(p)
    opt.step()
    decayed = 0
    for n, p in m.named_parameters():
        if p.ndim >= 2 and n.endswith("weight") and "conv" not in n:
            assert torch.allclose(p, before[n] * (1 - 1e-2 * 0.1), atol=1e-7)
            decayed += 1
        else:
            assert torch.equal(p, before[n])
    assert decayed > 0


def test_step_deterministic(stream):
    def run():
        torch.manual_seed(0)
        m = build_model(preset("micro"))
        st = new_state(m, small_cfg())
        s = small_sampler(stream)
        losses = []
        for _ in range(3):
            st, loss, _ = train_step(st, s.batch(2))
            losses.append(loss.total.item())
        return losses, [p.detach().clone() for p in m.parameters()]
    a, pa = run()
    b, pb = run()
    assert a == b and all(torch.equal(x, y) for x, y in zip(pa, pb))


def test_resume_is_bitwise(stream, tmp_path):
    cfg = small_cfg(total_steps=12, checkpoint_every=6)
    full, recs = train_loop(cfg, small_sampler(stream), build_model(preset("micro")), out_dir=tmp_path / "a")
    train_loop(cfg, small_sampler(stream), build_model(preset("micro")), out_dir=tmp_path / "b", max_steps=6)
    resumed, recs_b = train_loop(cfg, small_sampler(stream), build_model(preset("micro")),
                                 out_dir=tmp_path / "c", resume=tmp_path / "b" / "step_6.ckpt")
    assert resumed.step == 12
    assert [r["total"] for r in recs[6:]] == [r["total"] for r in recs_b]
    for p, q in zip(full.model.parameters(), resumed.model.parameters()):
        assert torch.equal(p, q)
    assert (tmp_path / "a" / "step_12.ckpt").exists() and (tmp_path / "a" / "last.ckpt").exists()


def test_metrics_jsonl(stream, tmp_path):
    train_loop(small_cfg(total_steps=5), small_sampler(stream), build_model(preset("micro")), out_dir=tmp_path)
    rows = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [1, 2, 3, 4, 5]
    for key in ("lr", "ce", "ratio", "total", "realized_ratios", "grad_norm", "bytes", "seconds"):
        assert key in rows[0]


def test_resume_refuses_other_config(stream, tmp_path):
    train_loop(small_cfg(total_steps=2, warmup_steps=1), small_sampler(stream), build_model(preset("micro")),
               out_dir=tmp_path)
    with pytest.raises(ConfigMismatch):
        load_train_state(tmp_path / "last.ckpt", build_model(preset("micro", seed=9)), small_cfg())


def test_loss_falls_below_uniform(stream):
    torch.manual_seed(0)
    _, recs = train_loop(small_cfg(total_steps=200, warmup_steps=20), small_sampler(stream),
                         build_model(preset("micro")))
    assert np.mean([r["ce"] for r in recs[-20:]]) < UNIFORM_CE - 1.0


def test_constant_record_memorised():
    rec = np.frombuffer(bytes(range(7, 39)), np.uint8)
    data = np.tile(rec, 200)
    sampler = Sampler(data, SamplerConfig(min_len_bytes=128, max_len_bytes=256, seed=0))
    cfg = TrainConfig(total_steps=500, warmup_steps=20, batch_size=2, lr=3e-3)
    _, recs = train_loop(cfg, sampler, build_model(preset("micro")))
    assert min(r["ce"] for r in recs) < 0.1


def test_non_finite_loss(stream):
    m = build_model(preset("micro"))
    with torch.no_grad():
        next(m.parameters()).fill_(float("nan"))
    st = new_state(m, small_cfg())
    with pytest.raises(NonFiniteLoss):
        train_step(st, small_sampler(stream).batch(1))


def test_checkpoint_roundtrip(tmp_path):
    m = build_model(preset("micro", seed=5))
    save_model(tmp_path / "m.ckpt", m, extra={"note": 1})
    m2, extra = load_model(tmp_path / "m.ckpt")
    assert extra == {"note": 1}
    x = torch.randint(0, 256, (40,))
    assert torch.equal(m(x).logits, m2(x).logits)
    save_model(tmp_path / "m2.ckpt", m2, extra={"note": 1})
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()
    with pytest.raises(ConfigMismatch):
        load_model(tmp_path / "m.ckpt", expect=preset("micro", seed=6))


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "x.ckpt")


def test_train_state_contains_optimizer(stream, tmp_path):
    m = build_model(preset("micro"))
    st = new_state(m, small_cfg())
    st, _, _ = train_step(st, build_batch([SequenceSample(np.arange(64).astype(np.uint8), 0)]))
    save_train_state(tmp_path / "s.ckpt", st)
    st2 = load_train_state(tmp_path / "s.ckpt", build_model(preset("micro")), small_cfg())
    assert st2.step == 1
    for p, q in zip(st.model.parameters(), st2.model.parameters()):
        assert torch.equal(st.optimizer.state[p]["exp_avg"], st2.optimizer.state[q]["exp_avg"])

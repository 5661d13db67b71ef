import math

import numpy as np
import pytest
import torch
from pool_oracle import simulate_pool

from crossgan.data import AugmentConfig, DomainDataset, StereoPair, synth_generate
from crossgan.trainer import (HistoryBuffer, NonFiniteLossError, TrainingConfig, TrainState, buffer_push_query,
                              generate_stereo, run_curriculum, translate)

SIZE = (32, 64)


def tiny_cfg(**kw):
    base = dict(epochs_mono=1, epochs_stereo=1, base_filters=4, residual_blocks=1, seed=0)
    base.update(kw)
    return TrainingConfig(**base)


@pytest.fixture(scope="module")
def data():
    sx = synth_generate(2, "X", SIZE, 4, seed=1)
    sy = synth_generate(2, "Y", SIZE, 4, seed=2)
    mx = synth_generate(2, "X", SIZE, 4, seed=3).left_view()
    my = synth_generate(2, "Y", SIZE, 4, seed=4).left_view()
    return mx, my, sx, sy


ACFG = AugmentConfig(*SIZE)


# -- history buffer -----------------------------------------------------------

def test_buffer_fill_phase():
    buf = HistoryBuffer(50, np.random.default_rng(0))
    assert buffer_push_query(buf, "a") == "a"
    assert buf.store == ["a"]


def simulate(ops, capacity, seed):
    return simulate_pool(ops, capacity, np.random.default_rng(seed))


def test_buffer_swap_at_forced_index():
    # find a seed whose first draw after filling swaps slot 3
    for seed in range(1000):
        r = np.random.default_rng(seed)
        if r.random() < 0.5 and int(r.integers(5)) == 3:
            break
    buf = HistoryBuffer(5, np.random.default_rng(seed))
    for i in range(5):
        buf.push_query(i)
    assert buf.push_query("new") == 3
    assert buf.store[3] == "new"
    expected_out, expected_store = simulate(list(range(5)) + ["new"], 5, seed)
    assert expected_out[-1] == 3 and expected_store == buf.store


def test_buffer_trace_matches_simulation():
    ops = list(range(10_000))
    buf = HistoryBuffer(50, np.random.default_rng(42))
    got = []
    for item in ops:
        got.append(buf.push_query(item))
        assert len(buf) <= 50
    want, store = simulate(ops, 50, 42)
    assert got == want and buf.store == store


# -- chained generation -------------------------------------------------------

def test_generate_stereo_chaining():
    state = TrainState(tiny_cfg(), image_size=SIZE)
    g = torch.Generator().manual_seed(0)
    x_l, x_r, y_w, y_w2 = (torch.rand(1, 3, *SIZE, generator=g) * 2 - 1 for _ in range(4))
    with torch.no_grad():
        a = generate_stereo(state.G, x_l, x_r, y_w)
        b = generate_stereo(state.G, x_l, x_r, y_w)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
        assert torch.equal(state.G(x_r, a[0]), a[1])
        c = generate_stereo(state.G, x_l, x_r, y_w2)
    assert not torch.equal(a[0], c[0]) and not torch.equal(a[1], c[1])
    with pytest.raises(ValueError):
        generate_stereo(state.G, x_l, x_r[..., :32], y_w)


# -- steps --------------------------------------------------------------------

class IdentityG(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.p = torch.nn.Parameter(torch.zeros(()))

    def forward(self, content, condition=None):
        return content + 0 * self.p


def _stub_identity(state):
    state.G, state.F = IdentityG(), IdentityG()
    state.opt_gen = torch.optim.Adam(list(state.G.parameters()) + list(state.F.parameters()), lr=1e-4)


def test_identity_generators_zero_cycle(data):
    mx, my, sx, sy = data
    state = TrainState(tiny_cfg(), image_size=SIZE)
    _stub_identity(state)
    rec = state.train_step_stereo(sx[0], sy[0], sy[1].left, sx[1].left)
    assert all(rec.losses[k] == 0.0 for k in rec.losses if k.startswith("cycle"))
    rec = state.train_step_mono(mx[0], my[0], my[1], mx[1])
    assert rec.losses["cycle_x"] == 0.0 and rec.losses["cycle_y"] == 0.0


def test_stereo_step_updates_and_grads_everywhere(data):
    mx, my, sx, sy = data
    state = TrainState(tiny_cfg(), image_size=SIZE)
    before = {k: {n: p.detach().clone() for n, p in m.named_parameters()} for k, m in state.networks().items()}
    state.train_step_stereo(sx[0], sy[0], sy[1].left, sx[1].left)
    for k, m in state.networks().items():
        for n, p in m.named_parameters():
            assert p.grad is not None and bool((p.grad != 0).any()), f"{k}.{n} got no gradient"
            assert not torch.equal(p.detach(), before[k][n]), f"{k}.{n} unchanged"


def test_step_records_reproducible(data):
    mx, my, sx, sy = data

    def run():
        st = TrainState(tiny_cfg(), image_size=SIZE)
        return [st.train_step_stereo(sx[i % 2], sy[i % 2], sy[0].left, sx[1].left).losses for i in range(3)]

    assert run() == run()


def test_condition_pathway_affects_loss(data):
    mx, my, _, _ = data
    a = TrainState(tiny_cfg(), image_size=SIZE).train_step_mono(mx[0], my[0], my[1], mx[1])
    zero = np.zeros_like(my[1])
    b = TrainState(tiny_cfg(), image_size=SIZE).train_step_mono(mx[0], my[0], zero, zero)
    assert a.losses["G_total"] != b.losses["G_total"]


def test_d_slowdown_scales_discriminator_loss(data):
    _, _, sx, sy = data
    r1 = TrainState(tiny_cfg(d_slowdown=0.5), image_size=SIZE).train_step_stereo(sx[0], sy[0], sy[1].left, sx[1].left)
    r2 = TrainState(tiny_cfg(d_slowdown=1.0), image_size=SIZE).train_step_stereo(sx[0], sy[0], sy[1].left, sx[1].left)
    assert r2.losses["D_X"] == 2 * r1.losses["D_X"]
    assert r2.losses["D_Y"] == 2 * r1.losses["D_Y"]
    assert r2.losses["G_total"] == r1.losses["G_total"]


def test_nonfinite_loss_aborts(data, tmp_path):
    mx, my, _, _ = data
    state = TrainState(tiny_cfg(), image_size=SIZE)
    state.dump_dir = tmp_path
    bad = np.full_like(mx[0], np.nan)
    with pytest.raises(NonFiniteLossError):
        state.train_step_mono(bad, my[0], my[1], mx[1])
    assert list(tmp_path.glob("nonfinite_*.pt"))


def test_baseline_rejects_stereo_step(data):
    _, _, sx, sy = data
    state = TrainState(tiny_cfg(mode="baseline"), image_size=SIZE)
    with pytest.raises(ValueError):
        state.train_step_stereo(sx[0], sy[0], sy[1].left, sx[1].left)


# -- curriculum -----------------------------------------------------------------

def test_step_counting(data):
    mx, my, sx, sy = data
    st = run_curriculum(tiny_cfg(epochs_mono=0, epochs_stereo=1), None, None, sx, sy, ACFG)
    assert st.step == 2 and [r.phase for r in st.records] == ["stereo", "stereo"]
    st = run_curriculum(tiny_cfg(epochs_mono=1, epochs_stereo=1), mx, my, sx, sy, ACFG)
    assert [r.phase for r in st.records] == ["mono", "mono", "stereo", "stereo"]


def test_dataset_mode_mismatch(data):
    mx, my, sx, sy = data
    with pytest.raises(ValueError):
        run_curriculum(tiny_cfg(), mx, my, mx, my, ACFG)
    with pytest.raises(ValueError):
        run_curriculum(tiny_cfg(), None, None, sx, sy, ACFG)


class TracedPair(StereoPair):
    right_reads = 0

    def __getattribute__(self, name):
        if name == "right":
            type(self).right_reads += 1
        return super().__getattribute__(name)


def test_baseline_phase_two_reads_left_only(data):
    mx, my, sx, sy = data
    tx = DomainDataset("X", [TracedPair(p.left, p.right) for p in sx.samples], "stereo")
    ty = DomainDataset("Y", [TracedPair(p.left, p.right) for p in sy.samples], "stereo")
    TracedPair.right_reads = 0
    st = run_curriculum(tiny_cfg(mode="baseline"), mx, my, tx, ty, ACFG)
    assert st.step == 4 and TracedPair.right_reads == 0
    run_curriculum(tiny_cfg(mode="stereo", epochs_mono=0), None, None, tx, ty, ACFG)
    assert TracedPair.right_reads > 0


def test_resume_reproduces_uninterrupted_run(data, tmp_path):
    mx, my, sx, sy = data
    cfg = tiny_cfg(epochs_mono=2, epochs_stereo=2)
    full = run_curriculum(cfg, mx, my, sx, sy, ACFG)
    run_curriculum(cfg, mx, my, sx, sy, ACFG, out_dir=tmp_path, stop_after=5)
    resumed = run_curriculum(cfg, mx, my, sx, sy, ACFG, resume=tmp_path / "ckpt_step0000005.pt")
    assert [r.losses for r in full.records[5:]] == [r.losses for r in resumed.records]
    for k, m in full.networks().items():
        other = dict(resumed.networks()[k].named_parameters())
        for n, p in m.named_parameters():
            assert torch.equal(p, other[n])


def test_outputs_written(data, tmp_path):
    mx, my, sx, sy = data
    run_curriculum(tiny_cfg(checkpoint_every=2), mx, my, sx, sy, ACFG, out_dir=tmp_path)
    assert (tmp_path / "final.pt").exists()
    assert len(list(tmp_path.glob("ckpt_step*.pt"))) == 2
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 4 and '"cycle_total"' in lines[0]
    assert (tmp_path / "config_echo.json").exists()


def test_checkpoint_roundtrip(data, tmp_path):
    mx, my, sx, sy = data
    st = run_curriculum(tiny_cfg(), mx, my, sx, sy, ACFG, out_dir=tmp_path)
    back = TrainState.from_checkpoint(tmp_path / "final.pt")
    assert back.step == st.step and back.cfg == st.cfg
    for k, m in st.networks().items():
        assert all(torch.equal(a, b) for a, b in zip(m.parameters(), back.networks()[k].parameters()))
    assert len(back.pool_x) == len(st.pool_x)


def test_constant_learning_rate(data):
    mx, my, sx, sy = data
    st = run_curriculum(tiny_cfg(), mx, my, sx, sy, ACFG)
    for opt in (st.opt_gen, st.opt_dx, st.opt_dy):
        assert all(g["lr"] == 0.0001 for g in opt.param_groups)


# -- translate --------------------------------------------------------------------

def test_translate_modes(data):
    _, _, sx, sy = data
    pair, cond = sx[0], sy[0].left
    st = TrainState(tiny_cfg(), image_size=SIZE)
    l, r = translate(st, pair.left, pair.right, cond)
    assert l.shape == pair.left.shape and r.shape == pair.right.shape
    l2, r2 = translate(st, pair.left, pair.right, cond)
    assert np.array_equal(l, l2) and np.array_equal(r, r2)
    assert translate(st, pair.left, None, cond, "mono").shape == pair.left.shape
    with pytest.raises(ValueError):
        translate(st, pair.left, None, cond, "stereo")
    with pytest.raises(ValueError):
        translate(st, pair.left, pair.right, cond, "baseline")
    base = TrainState(tiny_cfg(mode="baseline"), image_size=SIZE)
    bl, br = translate(base, pair.left, pair.right)
    assert not np.array_equal(bl, l)
    assert np.all(np.abs(bl) <= 1)


def test_config_defaults_match_recipe():
    c = TrainingConfig()
    assert (c.lambda_cycle, c.lr, c.batch_size, c.buffer_capacity, c.epochs_mono, c.epochs_stereo) == \
        (20.0, 0.0001, 1, 50, 40, 40)
    assert c.lr_schedule == "constant" and c.adam_beta1 == 0.5 and c.adam_beta2 == 0.999
    with pytest.raises(ValueError):
        TrainingConfig(batch_size=4)
    with pytest.raises(ValueError):
        TrainingConfig(lr_schedule="linear")
    assert math.isclose(c.d_slowdown, 0.5)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import reference_ecm, stub_networks, true_params
from seqbattnet import data, decoder
from seqbattnet.decoder import BatteryConfig
from seqbattnet.diffcore import nn
from seqbattnet.diffcore import tensor as T
from seqbattnet.diffcore.gradcheck import check_gradients
from seqbattnet.diffcore.tensor import Tensor
from seqbattnet.encoder import AdaptationParams

TRI = data.PRESETS["tri"].battery()


def param(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


# -- step functions ----------------------------------------------------------


def test_decay_coeff_values():
    a = decoder.decay_coeff([10.0, 100.0], 10.0).data
    assert abs(a[0] - math.exp(-1)) <= 1e-15
    assert abs(a[1] - math.exp(-0.1)) <= 1e-15
    assert decoder.decay_coeff([7.0], 7.0).data[0] == pytest.approx(math.exp(-1), abs=1e-15)
    assert decoder.decay_coeff([5.0], 1e-12).data[0] == pytest.approx(1.0, abs=1e-12)


def test_decay_coeff_domain():
    with pytest.raises(decoder.DomainError):
        decoder.decay_coeff([0.0, 1.0], 1.0)
    with pytest.raises(decoder.DomainError):
        decoder.decay_coeff([1.0], 0.0)


def test_ocv_midpoint_and_limits():
    half = lambda s: T.scale_shift(s, 0.0, 0.5)
    assert decoder.ocv(Tensor([[0.3]]), TRI, half).data[0, 0] == pytest.approx(2.8, abs=1e-15)
    one = lambda s: T.scale_shift(s, 0.0, 1.0)
    zero = lambda s: T.scale_shift(s, 0.0, 0.0)
    assert decoder.ocv(Tensor([[0.3]]), TRI, one).data[0, 0] == pytest.approx(3.6, abs=1e-15)
    assert decoder.ocv(Tensor([[0.3]]), TRI, zero).data[0, 0] == 2.0


def test_rc_resistance_zero_network():
    f = nn.resistance_network(nn.make_rng(0))
    for W, b, _ in f.layers:
        W.data[:] = 0.0
        b.data[:] = 0.0
    r = decoder.rc_resistance(Tensor([[0.4]]), Tensor([[0.9]]), TRI, lambda x: nn.fnn_forward(f, x)).data
    assert r.shape == (1, 2)
    assert np.allclose(r, 1e-4 + (1 - 1e-4) * 0.5, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 1))
def test_rc_resistance_inside_bounds(seed, soc, soh):
    f = nn.resistance_network(nn.make_rng(seed))
    r = decoder.rc_resistance(Tensor([[soc]]), Tensor([[soh]]), TRI, lambda x: nn.fnn_forward(f, x)).data
    assert np.all((r > TRI.r_min) & (r < TRI.r_max))


def test_rc_step_values():
    assert decoder.rc_step(Tensor([0.2]), 0.5, Tensor([0.1]), 2.0).data[0] == pytest.approx(0.2, abs=1e-15)
    assert decoder.rc_step(Tensor([0.2]), 1.0, Tensor([0.1]), 2.0).data[0] == 0.2
    assert decoder.rc_step(Tensor([0.2]), 0.5, Tensor([0.1]), 0.0).data[0] == pytest.approx(0.1, abs=1e-15)


def test_effective_capacity_values():
    assert decoder.effective_capacity(1.0, TRI).item() == pytest.approx(1.1, abs=1e-15)
    assert abs(decoder.effective_capacity(0.0, TRI).item() - 0.704) <= 1e-12
    assert abs(decoder.effective_capacity(0.5, TRI).item() - 0.902) <= 1e-12


def test_soc_step_values():
    s = decoder.soc_step(Tensor([0.5]), 1.1, 1.0, 1.1).data[0]
    assert abs(s - (0.5 - 1 / 3600)) <= 1e-15
    assert decoder.soc_step(Tensor([0.1]), 1e4, 1.0, 1.1).data[0] == 0.0
    assert decoder.soc_step(Tensor([0.37]), 0.0, 1.0, 1.1).data[0] == 0.37
    with pytest.raises(decoder.DomainError):
        decoder.soc_step(Tensor([0.5]), 1.0, 1.0, 0.0)


def test_terminal_voltage_values():
    v = decoder.terminal_voltage(Tensor([3.6]), Tensor([0.05]), 2.0, Tensor([0.1, 0.05])).data[0]
    assert abs(v - 3.35) <= 1e-12
    assert decoder.terminal_voltage(Tensor([3.3]), Tensor([0.05]), 0.0, Tensor([0.0, 0.0])).data[0] == 3.3
    d1 = 3.6 - decoder.terminal_voltage(Tensor([3.6]), Tensor([0.05]), 1.5, Tensor([0.0])).data[0]
    d2 = 3.6 - decoder.terminal_voltage(Tensor([3.6]), Tensor([0.05]), 3.0, Tensor([0.0])).data[0]
    assert d2 == pytest.approx(2 * d1, abs=1e-15)


def test_battery_config_validation():
    with pytest.raises(ValueError):
        BatteryConfig(C_rated=1.1, C_EOL=0.88, V0=2.0, V_EOD=3.0)
    with pytest.raises(ValueError):
        BatteryConfig(C_rated=1.0, C_EOL=1.2, V0=3.6, V_EOD=2.0)
    with pytest.raises(ValueError):
        BatteryConfig(C_rated=1.1, C_EOL=0.88, V0=3.6, V_EOD=2.0, dt=0.0)
    assert BatteryConfig.from_dict(TRI.to_dict()) == TRI


# -- step gradients ----------------------------------------------------------


@pytest.mark.parametrize("seed", range(20))
def test_step_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    v, a, r = param(rng.normal(size=2)), param(rng.uniform(0.1, 0.9, 2)), param(rng.uniform(0.01, 0.5, 2))
    cur = float(rng.uniform(0.5, 3))
    c = rng.normal(size=2)
    worst, _ = check_gradients(lambda: T.tsum(decoder.rc_step(v, a, r, cur) * c), [v, a, r])
    assert worst < 1e-4

    soc, ceff = param(rng.uniform(0.3, 0.7, 3)), param(rng.uniform(0.8, 1.1, 3))
    worst, _ = check_gradients(lambda: T.tsum(decoder.soc_step(soc, cur, 10.0, ceff) * c[0]), [soc, ceff])
    assert worst < 1e-4

    o, r0, vr = param(rng.uniform(3, 3.5, (2, 1))), param(rng.uniform(0.01, 0.1, (2, 1))), param(rng.normal(size=(2, 2)))
    worst, _ = check_gradients(lambda: T.tsum(decoder.terminal_voltage(o, r0, cur, vr) ** 2), [o, r0, vr])
    assert worst < 1e-4


# -- rollout -----------------------------------------------------------------


def _oracle(dt=1.0):
    return data.OracleConfig(battery=data.PRESETS["tri"].battery(dt=dt))


def test_rollout_matches_independent_ecm_1000_steps():
    cfg = _oracle()
    soh = 0.93
    g, f = stub_networks(cfg)
    currents = 1.1 + 0.6 * np.sin(np.arange(1000) / 37.0)
    res = decoder.rollout(true_params(cfg, soh), currents, cfg.battery, g, f)
    b = cfg.battery
    c_eff = b.beta * b.C_EOL + (b.C_rated - b.beta * b.C_EOL) * soh
    ref = reference_ecm(currents, b.dt, cfg.R0_true, cfg.r_true, cfg.tau_true,
                        lambda s: b.V_EOD + (b.V0 - b.V_EOD) * s ** cfg.ocv_exponent, c_eff)
    assert len(res.voltage) == 1000
    assert np.max(np.abs(res.voltage - ref)) < 1e-9


def test_rollout_replays_generated_cycle():
    cfg = data.OracleConfig(num_cycles=3, profile_kind="multistage",
                            battery=data.PRESETS["synthetic"].battery(dt=10.0), seed=9)
    g, f = stub_networks(cfg)
    for k, cyc in enumerate(data.synth_generate(cfg)):
        res = decoder.rollout(true_params(cfg, cfg.soh(k)), cyc.current, cfg.battery, g, f, dt=cyc.dt)
        assert np.max(np.abs(res.voltage - cyc.voltage)) < 1e-9


def test_rollout_resumes_from_mid_cycle_state():
    cfg = data.OracleConfig(num_cycles=1, battery=data.PRESETS["synthetic"].battery(dt=10.0))
    cur, vol, soc, vrc = data.simulate_cycle(cfg, 1.0, lambda j: 1.1)
    g, f = stub_networks(cfg)
    n = 30
    # state at the first predicted step: SOC before its update and RC voltages of the previous step
    p = true_params(cfg, 1.0, soc0=soc[n], v_rc0=vrc[n - 1])
    res = decoder.rollout(p, cur[n:], cfg.battery, g, f, measured_prefix=vol[:n])
    assert np.array_equal(res.voltage[:n], vol[:n])
    assert np.max(np.abs(res.predicted - vol[n:])) < 1e-9


def test_open_circuit_rollout_is_flat():
    cfg = _oracle()
    g, f = stub_networks(cfg)
    res = decoder.rollout(true_params(cfg, 0.9, soc0=0.6), np.zeros(50), cfg.battery, g, f)
    b = cfg.battery
    assert np.allclose(res.voltage, b.V_EOD + (b.V0 - b.V_EOD) * 0.6 ** 0.9, atol=1e-15, rtol=0)


def test_frozen_state_gives_constant_voltage():
    cfg = _oracle()
    g = lambda s: T.scale_shift(s, 0.0, 0.7)
    _, f = stub_networks(cfg)
    p = true_params(cfg, 0.9, soc0=0.5)
    p.tau = Tensor([[1e15, 1e15]])
    res = decoder.rollout(p, np.full(20, 1.5), cfg.battery, g, f)
    assert np.ptp(res.voltage) < 1e-12


def test_rollout_invariants_under_discharge():
    cfg = _oracle(dt=10.0)
    g, f = stub_networks(cfg)
    currents = np.random.default_rng(3).uniform(0, 3, 600)
    res = decoder.rollout(true_params(cfg, 0.8), currents, cfg.battery, g, f)
    assert np.all(np.diff(res.soc_traj) <= 0)
    assert np.all((res.soc_traj >= 0) & (res.soc_traj <= 1))
    assert res.soc_traj[-1] == 0.0  # driven into the lower clip


def test_infer_stop_at_step_three():
    cfg = _oracle()
    _, f = stub_networks(cfg)
    cur = np.full(10, 0.1)
    p = true_params(cfg, 1.0, soc0=1.0)
    calls = []

    def g(soc):
        # OCV stub that drops to the cutoff level on its third evaluation
        calls.append(1)
        return T.Tensor(np.full(soc.shape, 0.9 if len(calls) < 3 else 0.0))

    res = decoder.rollout(p, cur, cfg.battery, g, f, mode="infer_stop")
    assert res.stop_index == 3
    assert len(res.voltage) == 3
    assert res.voltage[-1] < cfg.battery.V_EOD
    assert np.all(res.voltage[:-1] >= cfg.battery.V_EOD)
    assert len(calls) == 3  # no state updates past the crossing


def test_full_and_stop_agree_before_stop_index():
    cfg = _oracle(dt=10.0)
    g, f = stub_networks(cfg)
    p = true_params(cfg, 0.9)
    cur = np.full(800, 2.2)
    full = decoder.rollout(p, cur, cfg.battery, g, f, mode="train_full")
    stop = decoder.rollout(p, cur, cfg.battery, g, f, mode="infer_stop")
    k = stop.stop_index
    assert k < len(cur)
    assert np.array_equal(full.voltage[:k], stop.voltage)
    assert full.voltage[k - 1] < cfg.battery.V_EOD <= full.voltage[:k - 1].min()


def test_stop_index_without_crossing_is_full_length():
    cfg = _oracle()
    g, f = stub_networks(cfg)
    res = decoder.rollout(true_params(cfg, 1.0), np.full(30, 1.0), cfg.battery, g, f, mode="infer_stop")
    assert res.stop_index == 30 == len(res.voltage)


def test_rollout_errors():
    cfg = _oracle()
    g, f = stub_networks(cfg)
    with pytest.raises(decoder.InputError):
        decoder.rollout(true_params(cfg, 1.0), [], cfg.battery, g, f)
    with pytest.raises(ValueError):
        decoder.rollout(true_params(cfg, 1.0), [1.0], cfg.battery, g, f, mode="bogus")


def test_prediction_result_shapes():
    cfg = _oracle()
    g, f = stub_networks(cfg)
    res = decoder.rollout(true_params(cfg, 1.0), np.ones(12), cfg.battery, g, f, measured_prefix=np.full(5, 3.4))
    assert len(res.voltage) == len(res.mask) == 17
    assert res.soc_traj.shape == (12,)
    assert res.v_rc_traj.shape == (12, 2)
    assert res.stop_index <= len(res.voltage)
    assert np.array_equal(res.predicted, res.voltage[5:])


def test_rollout_gradient_wrt_R0_50_steps():
    cfg = _oracle(dt=10.0)
    g, f = stub_networks(cfg)
    r0 = param([0.04])
    p = true_params(cfg, 0.9, soc0=0.8)
    p.R0 = r0
    cur = np.random.default_rng(1).uniform(0.5, 2.5, 50)

    def fn():
        ro = decoder.rollout_batch(p, cur[None], 10.0, cfg.battery, g, f)
        return T.tsum(ro.voltage)

    worst, _ = check_gradients(fn, [r0])
    assert worst < 1e-4


def test_batched_rollout_matches_single():
    cfg = _oracle(dt=10.0)
    g, f = stub_networks(cfg)
    rng = np.random.default_rng(2)
    cur = rng.uniform(0.5, 2.0, (3, 40))
    p = AdaptationParams(R0=Tensor(rng.uniform(0.01, 0.05, 3)), tau=Tensor(rng.uniform(10, 300, (3, 2))),
                         SOC0=Tensor(rng.uniform(0.5, 1, 3)), SOH=Tensor(rng.uniform(0.8, 1, 3)),
                         w=Tensor(np.full((3, 2), 0.5)), v_rc0=Tensor(rng.normal(0, 0.01, (3, 2))),
                         ocv0=Tensor(np.zeros(3)))
    batched = decoder.rollout_batch(p, cur, 10.0, cfg.battery, g, f).voltage.data
    for b in range(3):
        one = AdaptationParams(*(Tensor(getattr(p, k).data[b:b + 1]) for k in
                                 ("R0", "tau", "SOC0", "SOH", "w", "v_rc0", "ocv0")))
        single = decoder.rollout_batch(one, cur[b:b + 1], 10.0, cfg.battery, g, f).voltage.data
        assert np.array_equal(single[0], batched[b])


# -- fused rollout -------------------------------------------------------------


def _random_params(rng, B, e=2):
    return AdaptationParams(
        R0=param(rng.uniform(0.01, 0.1, B)), tau=param(rng.uniform(5.0, 300.0, (B, e))),
        SOC0=param(rng.uniform(0.6, 1.0, B)), SOH=param(rng.uniform(0.5, 1.0, B)),
        w=Tensor(np.full((B, e), 1.0 / e)), v_rc0=param(rng.uniform(0.0, 0.05, (B, e))),
        ocv0=Tensor(np.zeros(B)))


def _nets(seed):
    rng = nn.make_rng(seed)
    return nn.ocv_network(rng), nn.resistance_network(rng, 2)


def _composed(gp, fp, squash):
    def g(x):
        out = nn.fnn_forward(gp, x)
        return T.sigmoid(out) if squash else out

    def f(x):
        out = nn.fnn_forward(fp, x)
        return T.sigmoid(out) if squash else out

    return g, f


@pytest.mark.parametrize("squash", [False, True])
@pytest.mark.parametrize("stop", [False, True])
def test_fused_rollout_matches_composed(squash, stop):
    rng = np.random.default_rng(11)
    B, L = 3, 400
    bat = data.PRESETS["synthetic"].battery(dt=10.0)
    gp, fp = _nets(2)
    g, f = _composed(gp, fp, squash)
    currents = rng.uniform(0.5, 2.5, (B, L))
    leaves = _random_params(rng, B)
    weights = rng.uniform(size=(B, L))
    outs = []
    for fused in (False, True):
        with T.Tape() as tape:
            if fused:
                ro = decoder.rollout_fused(leaves, currents, bat.dt, bat, gp, fp, squash, stop)
            else:
                ro = decoder.rollout_batch(leaves, currents, bat.dt, bat, g, f, stop)
            k = ro.voltage.shape[1]
            loss = T.tsum(ro.voltage * ro.voltage * weights[:, :k])
        grads = T.backward(tape, loss)
        tensors = [leaves.R0, leaves.tau, leaves.SOC0, leaves.SOH, leaves.v_rc0]
        tensors += [t for W, b, _ in gp.layers + fp.layers for t in (W, b)]
        outs.append((ro, [grads.of(t) for t in tensors]))
    (a, ga), (b, gb) = outs
    assert np.array_equal(a.voltage.data, b.voltage.data)
    assert np.array_equal(a.soc, b.soc) and np.array_equal(a.v_rc, b.v_rc)
    assert np.array_equal(a.stop, b.stop)
    for x, y in zip(ga, gb):
        assert np.allclose(x, y, rtol=1e-11, atol=1e-13 * np.abs(x).max())


@pytest.mark.parametrize("seed", range(5))
def test_fused_rollout_gradients(seed):
    rng = np.random.default_rng(seed)
    bat = data.PRESETS["synthetic"].battery(dt=10.0)
    gp, fp = _nets(seed)
    leaves = _random_params(rng, 2)
    currents = rng.uniform(0.5, 2.5, (2, 25))

    def fn():
        ro = decoder.rollout_fused(leaves, currents, bat.dt, bat, gp, fp)
        return T.tsum(ro.voltage * ro.voltage)

    tensors = [leaves.R0, leaves.tau, leaves.SOC0, leaves.SOH, leaves.v_rc0,
               gp.layers[0][0], fp.layers[1][1]]
    worst, _ = check_gradients(fn, tensors, max_probes=8, rng=rng)
    assert worst < 1e-6


@pytest.mark.parametrize("sign", [-1.0, 1.0])
def test_fused_rollout_clipped_soc_matches_composed(sign):
    bat = data.PRESETS["synthetic"].battery(dt=10.0)
    gp, fp = _nets(0)
    g, f = _composed(gp, fp, False)
    # charging from full, or draining far past empty: SOC sits on a clip boundary
    currents = np.full((1, 40), sign * 30.0)
    res = []
    for fused in (False, True):
        leaves = _random_params(np.random.default_rng(0), 1)
        leaves.SOC0.data[:] = 1.0 if sign < 0 else 0.05
        with T.Tape() as tape:
            if fused:
                ro = decoder.rollout_fused(leaves, currents, bat.dt, bat, gp, fp)
            else:
                ro = decoder.rollout_batch(leaves, currents, bat.dt, bat, g, f)
            loss = T.tsum(ro.voltage)
        grads = T.backward(tape, loss)
        res.append((ro.soc, [grads.of(t) for t in (leaves.SOC0, leaves.SOH, leaves.R0)]))
    assert np.array_equal(res[0][0], res[1][0])
    assert np.all(res[0][0] == 1.0) if sign < 0 else res[0][0][0, -1] == 0.0
    for x, y in zip(res[0][1], res[1][1]):
        assert np.allclose(x, y, rtol=1e-12, atol=1e-15)

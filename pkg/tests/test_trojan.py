import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from trojan_rl.a2c import RolloutBatch
from trojan_rl.envs import Observation
from trojan_rl.trojan import (AttackConfig, PoisonSchedule, ReceiptLog, TriggerSpec, apply_trigger,
                              apply_trigger_frames, blend, poison_batch, schedule_next)

H = W = 10


def make_batch(n_workers=8, T=5, ages=None, since=None, actions=None, seed=0):
    rng = np.random.default_rng(seed)
    n = n_workers * T
    states = rng.integers(0, 2, size=(n, 2 * H * W)).astype(float)
    ages = np.full(n, 50) if ages is None else np.asarray(ages)
    since = np.full(n, 50) if since is None else np.asarray(since)
    actions = rng.integers(0, 3, n) if actions is None else np.asarray(actions)
    return RolloutBatch(states, actions.copy(), rng.uniform(-1, 1, n).round(0), np.zeros(n, bool),
                        np.zeros(n, bool), ages, since, np.zeros(n_workers), n_workers, T, (2, H, W))


def attack(mode="targeted", strength="strong", budget=4, total=40, window=2, seed=0, **kw):
    target = 0 if mode == "targeted" else None
    return AttackConfig(mode, strength, TriggerSpec.patch(H, W), PoisonSchedule(budget, total, window, seed),
                        target_action=target, **kw)


# -- blend -------------------------------------------------------------------

def test_zero_mask_is_identity():
    frames = np.random.default_rng(1).random((2, H, W))
    out = blend(frames, np.zeros((H, W)), np.full((H, W), 0.7))
    np.testing.assert_array_equal(out, frames)


def test_full_mask_replaces_last_frame():
    frames = np.random.default_rng(2).random((2, H, W))
    pattern = np.random.default_rng(3).random((H, W))
    out = blend(frames, np.ones((H, W)), pattern)
    np.testing.assert_array_equal(out[-1], pattern)
    np.testing.assert_array_equal(out[0], frames[0])


def test_default_patch_on_blank_frame():
    obs = Observation(np.zeros((2, H, W)), 0)
    out = apply_trigger(obs, TriggerSpec.patch(H, W))
    assert np.count_nonzero(out.frames[-1] == 0.5) == 9
    assert out.frames[-1][:3, :3].sum() == 4.5
    assert out.frames[-1].sum() == 4.5
    assert not out.frames[0].any()
    assert not obs.frames.any()  # input untouched


def test_all_frames_option():
    out = apply_trigger_frames(np.ones((2, H, W)), TriggerSpec.patch(H, W, last_frame_only=False))
    assert (out[:, :3, :3] == 0.5).all()


def test_shape_mismatch():
    with pytest.raises(ValueError):
        apply_trigger_frames(np.zeros((2, 12, 12)), TriggerSpec.patch(H, W))


def test_trigger_validation():
    with pytest.raises(ValueError):
        TriggerSpec(np.full((H, W), 1.5), np.zeros((H, W)))
    with pytest.raises(ValueError):
        TriggerSpec(np.zeros((H, W)), np.zeros((H, W + 1)))
    with pytest.raises(ValueError):
        TriggerSpec.patch(H, W, size=3, row=8)


@given(st.integers(0, 2**31), st.booleans())
def test_binary_mask_idempotent_and_in_range(seed, all_frames):
    rng = np.random.default_rng(seed)
    mask = (rng.random((H, W)) < 0.3).astype(float)
    trig = TriggerSpec(mask, rng.random((H, W)), last_frame_only=not all_frames)
    frames = rng.random((3, 2, H, W))
    once = apply_trigger_frames(frames, trig)
    np.testing.assert_array_equal(apply_trigger_frames(once, trig), once)
    soft = TriggerSpec(rng.random((H, W)), rng.random((H, W)))
    out = apply_trigger_frames(frames, soft)
    assert out.min() >= 0.0 and out.max() <= 1.0


# -- schedule ----------------------------------------------------------------

def test_saturated_schedule_poisons_everything():
    sched = PoisonSchedule(100, 100, window=0)
    assert all(schedule_next(sched, ((i, 0, 0) for i in range(100))))
    assert sched.dispensed == 100 and sched.exhausted


def _simulated_stream(n, seed):
    """Episode ages and steps-since-life-loss for a stream with random life losses and resets."""
    rng = np.random.default_rng(seed)
    age = since = 0
    for i in range(n):
        yield i, age, since
        age += 1
        since += 1
        if rng.random() < 0.08:
            since = 0
        if rng.random() < 0.01:
            age = since = 0


@given(st.integers(0, 6), st.integers(1, 2000), st.integers(0, 2**31))
def test_window_never_violated(window, budget, seed):
    sched = PoisonSchedule(budget, 5000, window=window, seed=seed)
    stream = list(_simulated_stream(5000, seed))
    for (i, age, since), fire in zip(stream, schedule_next(sched, iter(stream))):
        if fire:
            assert age >= window and since >= window
    assert sched.dispensed <= budget


def test_budget_exact_and_gap_spread():
    sched = PoisonSchedule(100, 100_000, window=2, seed=5)
    fired = [i for (i, *_), f in zip(_simulated_stream(100_000, 5),
                                      schedule_next(sched, _simulated_stream(100_000, 5))) if f]
    assert len(fired) == 100
    gaps = np.diff(fired)
    # oracle: CV of gaps between 100 uniform draws, estimated by Monte Carlo on the positions alone
    rng = np.random.default_rng(0)
    ref = [np.std(d := np.diff(np.sort(rng.choice(100_000, 100, replace=False)))) / np.mean(d) for _ in range(500)]
    assert np.std(gaps) / np.mean(gaps) < 1.1 * np.mean(ref)


def test_schedule_is_seeded_and_resettable():
    a, b = PoisonSchedule(50, 1000, seed=3), PoisonSchedule(50, 1000, seed=3)
    np.testing.assert_array_equal(a.positions, b.positions)
    list(schedule_next(a, ((i, 9, 9) for i in range(1000))))
    a.reset()
    assert a.dispensed == 0


def test_stream_must_increase():
    sched = PoisonSchedule(5, 100)
    with pytest.raises(ValueError):
        list(schedule_next(sched, [(3, 9, 9), (3, 9, 9)]))


def test_schedule_validation():
    for args in [(0, 10), (11, 10), (1, 0)]:
        with pytest.raises(ValueError):
            PoisonSchedule(*args)
    with pytest.raises(ValueError):
        PoisonSchedule(1, 10, window=-1)


# -- poison_batch ------------------------------------------------------------

def _replay(schedule_args, batch):
    """Independent oracle: which indices a fresh schedule picks for this batch."""
    sched = PoisonSchedule(*schedule_args)
    out = []
    for i in range(len(batch)):
        if sched.exhausted:
            break
        if sched.positions[sched.cursor] <= i and batch.episode_ages[i] >= sched.window \
                and batch.steps_since_life_loss[i] >= sched.window:
            out.append(i)
            sched.cursor += 1
    return out


def test_strong_targeted_receipt():
    batch = make_batch()
    before = batch.states.copy()
    att = attack(budget=4, total=40)
    receipt = poison_batch(batch, att, 0, 3)
    expected = _replay((4, 40, 2, 0), make_batch())
    assert receipt.indices == expected and len(expected) == 4
    assert batch.poisoned_mask.sum() == 4
    assert all(batch.actions[i] == 0 for i in expected)
    assert all(batch.rewards[i] == 1.0 for i in expected)
    for i in range(len(batch)):
        changed = not np.array_equal(batch.states[i], before[i])
        assert changed == (i in expected)  # binary states always change under a 0.5 patch


def test_ineligible_indices_are_skipped():
    ages = np.zeros(40, int)
    ages[30:] = 10
    batch = make_batch(ages=ages)
    receipt = poison_batch(batch, attack(budget=4, total=40), 0, 3)
    assert all(i >= 30 for i in receipt.indices)


def test_exhausted_budget_leaves_batch_alone():
    att = attack(budget=2, total=40)
    poison_batch(make_batch(), att, 0, 3)
    batch = make_batch(seed=9)
    ref = make_batch(seed=9)
    receipt = poison_batch(batch, att, 40, 3)
    assert len(receipt) == 0
    np.testing.assert_array_equal(batch.states, ref.states)
    np.testing.assert_array_equal(batch.rewards, ref.rewards)


def test_weak_targeted_rewards_follow_agreement():
    actions = np.array([0, 1, 2, 0] * 10)
    batch = make_batch(actions=actions)
    receipt = poison_batch(batch, attack(strength="weak", budget=40, total=40, window=0), 0, 3)
    assert len(receipt) == 40 and receipt.actions_written == {}
    np.testing.assert_array_equal(batch.actions, actions)
    np.testing.assert_array_equal(batch.rewards, np.where(actions == 0, 1.0, -1.0))


def test_untargeted_strong_uniform_within_3_sigma():
    n = 3000
    att = attack(mode="untargeted", budget=n, total=n, window=0, seed=11)
    counts = np.zeros(3)
    for off in range(0, n, 40):
        b = make_batch(seed=off)
        r = poison_batch(b, att, off, 3)
        for a in r.actions_written.values():
            counts[a] += 1
    assert counts.sum() == n
    sigma = np.sqrt(n * (1 / 3) * (2 / 3))
    assert np.all(np.abs(counts - n / 3) < 3 * sigma)


def test_untargeted_cycle_source():
    att = attack(mode="untargeted", budget=40, total=40, window=0, untargeted_action_source="cycle")
    r = poison_batch(make_batch(), att, 0, 3)
    assert [r.actions_written[i] for i in r.indices] == [i % 3 for i in range(40)]


def test_weak_untargeted_never_writes_actions():
    att = attack(mode="untargeted", strength="weak", budget=40, total=40, window=0)
    b = make_batch()
    r = poison_batch(b, att, 0, 3)
    assert r.actions_written == {}
    for i in r.indices:
        assert b.rewards[i] == (1.0 if b.actions[i] == r.intended_actions[i] else -1.0)


@given(st.sampled_from(["targeted", "untargeted"]), st.sampled_from(["strong", "weak"]), st.integers(0, 2**31))
def test_fuzzed_rewards_stay_in_range(mode, strength, seed):
    # 50 examples x 2000 poisonings = 10^5 per run
    rng = np.random.default_rng(seed)
    att = attack(mode, strength, budget=2000, total=2000, window=0, seed=seed,
                 reward_high=float(rng.uniform(0, 1)), reward_low=float(rng.uniform(-1, 0)))
    for off in range(0, 2000, 40):
        b = make_batch(seed=seed + off)
        poison_batch(b, att, off, 3)
        assert np.all(b.rewards >= -1.0) and np.all(b.rewards <= 1.0)
        if strength == "weak":
            assert np.array_equal(b.actions, make_batch(seed=seed + off).actions)
    assert att.schedule.dispensed == 2000


def test_attack_validation():
    trig = TriggerSpec.patch(H, W)
    sched = PoisonSchedule(1, 10)
    with pytest.raises(ValueError):
        AttackConfig("targeted", "strong", trig, sched)
    with pytest.raises(ValueError):
        AttackConfig("sideways", "strong", trig, sched, target_action=0)
    with pytest.raises(ValueError):
        AttackConfig("targeted", "strong", trig, sched, target_action=0, reward_high=2.0)
    with pytest.raises(ValueError):
        poison_batch(make_batch(), AttackConfig("targeted", "strong", trig, PoisonSchedule(1, 40), target_action=5),
                     0, 3)


def test_receipt_log_replays(tmp_path):
    path = tmp_path / "receipts.csv"
    log = ReceiptLog(path, rollout_len=5, label="strong_targeted")
    att = attack(budget=8, total=80)
    written = []
    for off in (0, 40):
        r = poison_batch(make_batch(seed=off), att, off, 3)
        log.append(r)
        written += [(off + i, i // 5, r.actions_written[i], r.rewards_written[i]) for i in r.indices]
    lines = path.read_text().splitlines()
    assert lines[0] == "# schema: poison_receipts v1"
    rows = list(csv.DictReader(lines[1:]))
    assert [(int(r["step"]), int(r["worker"]), int(r["action_written"]), float(r["reward_written"]))
            for r in rows] == written
    assert len(rows) == 8

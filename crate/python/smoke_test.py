"""Exercise the Python bindings end to end.

    pip install --no-build-isolation ./crates/py
    python python/smoke_test.py [path/to/model.ckpt]
"""

import math
import sys

import pumpsched


def check_hydraulics():
    assert pumpsched.hydraulic_power(360.0, 50.0) == 49.05
    op = pumpsched.operating_point("NP1", 52.0, 300.0)
    assert op.q > 0 and op.head > 52.0 and 0 < op.eta <= 1, op
    slower = pumpsched.operating_point("NP1", 52.0, 300.0, speed=0.9)
    assert slower.q < op.q


def check_reward():
    r = pumpsched.reward("v1", "NP2", "NP2", 120, 54.0, False, 200.0, 40.0)
    assert math.isclose(r, -4.789052598597655621, abs_tol=1e-12), r
    try:
        pumpsched.reward("v3", "NOP", "NOP", 0, 55.0, False, 0.0, 0.0)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown variant accepted")


def check_env():
    env = pumpsched.Env(days=2, seed=3)
    obs = env.reset(level=52.0)
    assert obs["prev_action"] == "NOP" and obs["tank_level"] == 52.0
    acted = []
    total = 0.0
    for minute in range(1440):
        action = "NP3" if (minute // 60) % 2 == 0 else "NOP"
        obs, reward, info = env.step(action)
        acted.append(action)
        total += reward
        assert 47.0 <= obs["tank_level"] <= 57.0
    assert info["episode_end"] and env.step_in_episode == 0
    assert len(env.features()) == pumpsched.OBS_DIM
    csv = env.trajectory_csv()
    assert pumpsched.extract_actions(csv) == acted
    report = pumpsched.report(csv)
    assert report["total_switches"] == pumpsched.count_switches(acted)
    print(f"one day: reward {total:.1f}, {report['total_kwh']:.1f} kWh, {report['total_switches']} switches")


def check_sum_tree():
    tree = pumpsched.SumTree(8)
    for leaf in range(8):
        tree.set(leaf, leaf + 1.0)
    assert tree.total == 36.0
    assert tree.find(0.5) == 0 and tree.find(35.5) == 7
    try:
        tree.get(8)
    except IndexError:
        pass
    else:
        raise AssertionError("out-of-range leaf accepted")


def check_synth():
    csv = pumpsched.synthesize_log(days=1, seed=1)
    assert len(csv.strip().splitlines()) == 1441
    assert csv == pumpsched.synthesize_log(days=1, seed=1)


def check_policy(path):
    policy = pumpsched.Policy.load(path)
    env = pumpsched.Env(days=1, seed=5)
    env.reset()
    for _ in range(60):
        action = policy.act_in(env)
        assert action in pumpsched.actions()
        env.step(action)
    assert len(policy.head_values(env.features())) == policy.k
    print(f"policy with K={policy.k} after {policy.updates} updates ran 60 minutes")


def main():
    check_hydraulics()
    check_reward()
    check_env()
    check_sum_tree()
    check_synth()
    if len(sys.argv) > 1:
        check_policy(sys.argv[1])
    print("smoke test passed")


if __name__ == "__main__":
    main()

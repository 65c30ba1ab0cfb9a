"""Smoke test for the dppo_lab extension.

Build and run:
    cargo build --release -p dppo-py --features extension-module
    cp target/release/libdppo_lab.so python/dppo_lab.so
    python3 python/smoke_test.py
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import dppo_lab  # noqa: E402


def check_numerics():
    alpha_bar, sigma = dppo_lab.cosine_schedule(20)
    assert len(alpha_bar) == 20 and len(sigma) == 20
    assert all(a > b for a, b in zip(alpha_bar, alpha_bar[1:]))
    assert all(s >= 0 for s in sigma)

    adv, ret = dppo_lab.gae([0.0, 0.0, 1.0], [0.1, 0.2, 0.3], [False, False, True], 0.0, 0.99, 0.0)
    assert math.isclose(adv[2], 1.0 - 0.3)
    assert math.isclose(ret[0], adv[0] + 0.1)

    eps = dppo_lab.clip_schedule(0.1, 5)
    assert math.isclose(eps[0], 0.1) and math.isclose(eps[-1], 0.01)

    loss, frac, kl = dppo_lab.ppo_loss([math.log(1.2)], [0.0], [2.0], [0.1])
    assert math.isclose(loss, -2.2) and frac == 1.0 and kl >= 0


def check_env():
    env = dppo_lab.AvoidEnv(seed=1)
    obs = env.reset()
    assert len(obs) == 4
    obs, reward, done, event = env.step([obs[0] + 0.02, obs[1]])
    assert reward == 0.0 and not done and event is None


def check_pipeline():
    with tempfile.TemporaryDirectory() as out:
        cfg = dppo_lab.RunConfig(
            """
[demos]
n_episodes = 4
[pretrain]
epochs = 2
eval_episodes = 2
[eval]
n_episodes = 3
"""
        )
        cfg.out = out
        cfg.seed = 4
        cfg.validate()
        for cmd in ["gen-demos", "pretrain", "eval", "plot"]:
            dppo_lab.run_command(cmd, cfg)
        with open(os.path.join(out, "eval", "eval.json")) as f:
            report = json.load(f)
        assert report["summary"]["n_episodes"] == 3

        policy = dppo_lab.Policy.load(os.path.join(out, "pretrain", "checkpoint"))
        assert policy.kind == "diffusion"
        chunks = policy.sample([[0.05, 0.5, 0.0, 0.0]], seed=0)
        assert len(chunks) == 1 and len(chunks[0]) == 8
        assert chunks == policy.sample([[0.05, 0.5, 0.0, 0.0]], seed=0)

        with open(os.path.join(out, "eval", "trajectories.jsonl")) as f:
            svg = dppo_lab.render_svg(f.read())
        assert svg.count("<path") == 3

        try:
            dppo_lab.Policy.load(os.path.join(out, "missing"))
        except IOError:
            pass
        else:
            raise AssertionError("missing checkpoint should raise")


if __name__ == "__main__":
    check_numerics()
    check_env()
    check_pipeline()
    print("dppo_lab smoke test ok")

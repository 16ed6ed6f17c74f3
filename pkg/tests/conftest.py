import numpy as np
import pytest

from segrl.policy import PolicyParams, Vocab, sequence_logprobs
from segrl.rollout import Segment, Status, Trajectory
from segrl.trainer import Group, assign_advantages


@pytest.fixture
def small_vocab():
    return Vocab(size=6, eos_id=5, answer_marker_id=4)


def make_trajectory(params, prompt, response, seg_lens, rng, reward=0, key=0, member=0, gen_jitter=0.0, final_jitter=0.0):
    """Completed trajectory with stored log-probs near the current policy's."""
    cur = sequence_logprobs(params, prompt, response)
    gen = cur - np.abs(rng.normal(0, gen_jitter, cur.size)) if gen_jitter else cur.copy()
    segments, i = [], 0
    for v, n in enumerate(seg_lens):
        segments.append(Segment(tuple(response[i : i + n]), v, tuple(gen[i : i + n])))
        i += n
    assert i == len(response)
    traj = Trajectory(f"p{key}", tuple(prompt), segments, Status.FINISHED_EOS, member=member, group_key=key)
    final = cur + rng.normal(0, final_jitter, cur.size) if final_jitter else cur.copy()
    traj.final_rollout_logprobs = final
    traj.final_version = len(seg_lens) - 1
    traj.reward = reward
    return traj


def random_batch(rng, V=5, width=2, n_groups=2, G=4, max_len=6, gen_jitter=0.4, final_jitter=0.4, scale=1.5):
    """Random params plus retained groups with mixed rewards and advantages."""
    params = PolicyParams.random(V, width, rng, scale=scale)
    groups = []
    for k in range(n_groups):
        rewards = np.zeros(G, dtype=int)
        rewards[: rng.integers(1, G)] = 1
        rng.shuffle(rewards)
        prompt = list(rng.integers(0, V, rng.integers(1, 4)))
        trajs = []
        for m in range(G):
            n = int(rng.integers(1, max_len + 1))
            response = [int(t) for t in rng.integers(0, V, n)]
            cuts = sorted(set(rng.integers(1, n, size=min(2, n - 1)).tolist())) if n > 1 else []
            seg_lens = np.diff([0, *cuts, n]).tolist()
            trajs.append(make_trajectory(params, prompt, response, seg_lens, rng, int(rewards[m]), k, m, gen_jitter, final_jitter))
        groups.append(Group(f"p{k}", trajs))
    assign_advantages(groups)
    return params, groups

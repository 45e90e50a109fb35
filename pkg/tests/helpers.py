"""Small shared builders for tests."""

import math

import numpy as np

from lgdetect.channel import ChannelConfig, generate_dataset, make_task

TINY = ChannelConfig(nt=2, nr=4, calibration_draws=100)


def tiny_dataset(task_id=0, n=60, snr=15.0, cfg=TINY, seed=0):
    return generate_dataset(make_task(seed, task_id, cfg), n, snr, cfg, seed=seed)


def noiseless_dataset(task_id=0, n=40, cfg=TINY):
    return generate_dataset(make_task(0, task_id, cfg), n, math.inf, cfg, seed=0)

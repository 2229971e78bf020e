"""Operation counters used to audit which code paths an inference run touched."""

COUNTS = {"warp": 0, "correlate": 0, "decode_flow": 0}


def bump(name):
    COUNTS[name] += 1


def reset():
    for key in COUNTS:
        COUNTS[key] = 0


def snapshot():
    return dict(COUNTS)

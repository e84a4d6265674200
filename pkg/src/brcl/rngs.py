"""Counter-based random streams.

All stochastic code in the package draws from Philox generators so that
replication streams derived from (master seed, experiment id, replication id)
are independent by construction and jump-ahead capable.
"""

import numpy as np

__all__ = ["as_generator", "replication_stream", "seed_record"]


def as_generator(seed):
    """Coerce ``seed`` (int, SeedSequence, or Generator) to a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def replication_stream(master_seed, experiment_id, replication_id):
    """Independent stream for one replication of one experiment.

    The stream id (experiment_id, replication_id) is folded into the
    SeedSequence spawn key, so no two replications share a stream.
    """
    ss = np.random.SeedSequence(entropy=int(master_seed),
                                spawn_key=(int(experiment_id), int(replication_id)))
    return np.random.Generator(np.random.Philox(ss))


def seed_record(seed, experiment_id=None, replication_id=None):
    """JSON-ready description of how a stream was derived."""
    rec = {"generator": "philox"}
    if isinstance(seed, np.random.Generator):
        rec["kind"] = "generator-state"
        rec["state_hash"] = hash(str(seed.bit_generator.state)) & 0xFFFFFFFF
    elif isinstance(seed, np.random.SeedSequence):
        rec["kind"] = "seed-sequence"
        rec["entropy"] = seed.entropy
        rec["spawn_key"] = list(seed.spawn_key)
    else:
        rec["kind"] = "integer"
        rec["entropy"] = int(seed)
    if experiment_id is not None:
        rec["experiment_id"] = experiment_id
    if replication_id is not None:
        rec["replication_id"] = replication_id
    return rec

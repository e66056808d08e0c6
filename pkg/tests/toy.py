"""Small seeded datasets shared by the trainer, CLI and acceptance tests."""
from befa.dataio import SyntheticSpec, split_811, synth_generate
from befa.numkit import make_rng

# desk-scale training setup used by the synthetic benchmark; chosen on
# tuning seeds 101-103, never on the evaluation seeds 1-5
BENCH_TRAIN = dict(dim=16, batch_size=2048, lr=0.01, epochs=1000, patience=30)


def toy(seed=7, users=50, items=80, per_user=20, **spec_kw):
    spec = SyntheticSpec(users=users, items=items, per_user=per_user, **spec_kw)
    inter, raw, ideal = synth_generate(spec, make_rng(seed))
    return split_811(inter, seed), {"v": raw.data}, {"v": ideal.data}

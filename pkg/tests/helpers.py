from forgeryloc.config import Config, CorpusConfig


def small_corpus_config(**kw) -> CorpusConfig:
    base = dict(n_clips=4, seed=5, duration_min_s=1.0, duration_max_s=1.4, n_segments_max=2,
                seg_dur_max_s=0.3)
    base.update(kw)
    return CorpusConfig(**base)


def tiny_config(**model_kw) -> Config:
    """All defaults except desk-scale model widths and short training."""
    cfg = Config.from_dict({
        "model": {"model_dim": 16, "channels": 4, "spectral_bins": 4, "attn_dim": 8,
                  "amlp_attn_dim": 4, "prn_dim": 8, "prn_hidden": 8, **model_kw},
        "train_fdn": {"epochs": 1},
        "train_prn": {"epochs": 1, "batch_size": 2},
    })
    return cfg


def random_instance(rng, n_clips=3, max_gt=3, max_props=6):
    """Random gts and scored proposals on a coarse grid so exact overlaps occur."""
    gts, props = {}, {}
    for c in range(n_clips):
        cid = f"c{c}"
        gts[cid] = [(float(rng.integers(0, 40)) * 0.1, float(rng.integers(1, 10)) * 0.1)
                    for _ in range(rng.integers(0, max_gt + 1))]
        props[cid] = [(float(rng.integers(0, 40)) * 0.1, float(rng.integers(1, 10)) * 0.1,
                       float(rng.random())) for _ in range(rng.integers(0, max_props + 1))]
    return props, gts

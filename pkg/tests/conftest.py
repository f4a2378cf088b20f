import pytest

from diffcap.backbone import DecoderConfig, EncoderConfig, ModelConfig
from diffcap.data import generate_pair
from diffcap.train import QaDataset, TrainConfig, generate_captions, train

OVERFIT_PAIRS = 32
OVERFIT_STEPS = 300

# small enough that a training step takes a few milliseconds
TINY_MODEL = ModelConfig(
    encoder=EncoderConfig(patch_size=16, layers=2, channels=16, heads=2, mlp_hidden=32, tapped_layers=(1, 2)),
    decoder=DecoderConfig(layers=1, channels=32, heads=2, ff_hidden=64, max_len=96),
    mdp_heads=2,
    mdp_hidden=16,
)


def tiny_config(**kw) -> TrainConfig:
    base = dict(model=TINY_MODEL, steps=5, batch_size=4, log_every=0, warmup_frac=0.2)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_pairs():
    return [generate_pair(s, pair_id=f"t{s:03d}") for s in range(12)]


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """The default toy model trained on 32 pairs; shared by the training and acceptance suites."""
    out = tmp_path_factory.mktemp("overfit")
    pairs = [generate_pair(s, pair_id=f"o{s:03d}") for s in range(OVERFIT_PAIRS)]
    for p in pairs:
        p.split = "train"
    cfg = TrainConfig(steps=OVERFIT_STEPS, out_dir=str(out), deterministic=True, log_every=0)
    record, model, vocab = train(cfg, pairs)
    captions = generate_captions(model, vocab, QaDataset(pairs, vocab))
    return {"record": record, "model": model, "vocab": vocab, "pairs": pairs,
            "captions": captions, "config": cfg}


ACCEPTANCE_LINES = []
ACCEPTANCE_NOTES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
        for line in ACCEPTANCE_NOTES:
            terminalreporter.write_line(line)

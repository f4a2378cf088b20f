import json
import math
import struct

import pytest
import torch

from conftest import TINY_MODEL, tiny_config
from diffcap.backbone import DiffCaptioner
from diffcap.checkpoint import MAGIC, CheckpointError, load_into, read_checkpoint, save_checkpoint
from diffcap.data import build_corpus
from diffcap.layers import ConfigError
from diffcap.metrics import METRICS
from diffcap.train import (
    EvaluationError,
    TrainConfig,
    TrainingError,
    ablate,
    evaluate,
    load_model,
    lr_schedule,
    train,
)


class TestSchedule:
    def test_endpoints(self):
        assert lr_schedule(0, 100, 0.1, 2.0) == 0.0
        assert lr_schedule(10, 100, 0.1, 2.0) == 2.0
        assert lr_schedule(100, 100, 0.1, 2.0) == pytest.approx(0.0, abs=1e-15)

    def test_decay_midpoint(self):
        assert lr_schedule(55, 100, 0.1, 2.0) == pytest.approx(1.0, abs=1e-12)
        assert lr_schedule(50, 100, 0.0, 3.0) == pytest.approx(1.5, abs=1e-12)

    def test_warmup_linear(self):
        assert lr_schedule(5, 100, 0.1, 2.0) == pytest.approx(1.0)

    def test_monotone_after_warmup(self):
        vals = [lr_schedule(s, 200, 0.25, 1.0) for s in range(50, 201)]
        assert all(b <= a for a, b in zip(vals, vals[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_schedule(11, 10, 0.1, 1.0)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(warmup_frac=1.0), dict(lr=0.0), dict(encoder_lr=-1.0),
                                    dict(batch_size=0), dict(question_template=9)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_round_trip(self):
        cfg = tiny_config(lora_enabled=True, seed=4)
        again = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"learning_rate": 1.0})

    def test_encoder_rate_default(self):
        assert TrainConfig(lr=1e-3).encoder_rate == pytest.approx(2e-4)


class TestTrain:
    def test_deterministic_loss_trace(self, tiny_pairs, tmp_path):
        runs = [train(tiny_config(steps=10, deterministic=True), tiny_pairs, save=False)[0] for _ in range(2)]
        assert runs[0].loss_trace == runs[1].loss_trace
        assert len(runs[0].loss_trace) == 10

    def test_seed_changes_trace(self, tiny_pairs):
        a = train(tiny_config(seed=1), tiny_pairs, save=False)[0]
        b = train(tiny_config(seed=2), tiny_pairs, save=False)[0]
        assert a.loss_trace != b.loss_trace

    def test_two_rate_groups(self, tiny_pairs):
        rec = train(tiny_config(steps=8, lr=5e-3), tiny_pairs, save=False)[0]
        assert any(rest > 0 for _, rest in rec.lr_trace)
        for enc, rest in rec.lr_trace:
            assert enc == pytest.approx(rest / 5, rel=1e-12, abs=0)

    def test_epochs_define_steps(self, tiny_pairs):
        rec = train(tiny_config(steps=None, epochs=2, batch_size=4, grad_accum=2), tiny_pairs, save=False)[0]
        assert len(rec.loss_trace) == math.ceil(2 * len(tiny_pairs) / 8)

    def test_nonfinite_loss_aborts_with_dump(self, tiny_pairs, tmp_path, monkeypatch):
        monkeypatch.setattr(DiffCaptioner, "loss", lambda self, a, b, batch: torch.tensor(float("nan")))
        with pytest.raises(TrainingError, match="non-finite"):
            train(tiny_config(out_dir=str(tmp_path)), tiny_pairs, save=False)
        dump = json.loads((tmp_path / "nonfinite_step0.json").read_text())
        assert len(dump["pair_ids"]) == 4

    def test_artifacts_written(self, tiny_pairs, tmp_path):
        rec = train(tiny_config(out_dir=str(tmp_path)), tiny_pairs)[0]
        run = json.loads((tmp_path / "run.json").read_text())
        assert run["config"] == rec.config and run["loss_trace"] == rec.loss_trace
        assert json.loads((tmp_path / "loss_trace.json").read_text()) == rec.loss_trace


class TestCheckpoint:
    def test_layout(self, tiny_pairs, tmp_path):
        rec, model, vocab = train(tiny_config(out_dir=str(tmp_path)), tiny_pairs)
        raw = (tmp_path / "model.ckpt").read_bytes()
        assert raw[:8] == MAGIC
        version, hlen = struct.unpack("<IQ", raw[8:20])
        header = json.loads(raw[20:20 + hlen])
        assert version == 1
        assert set(header["groups"]) == {"encoder", "mdp", "projector", "decoder", "lora"}
        assert header["seed"] == 0 and header["vocabulary"] == vocab.to_list()
        last = max((e for g in header["groups"].values() for e in g), key=lambda e: e["offset"])
        assert 20 + hlen + last["offset"] + last["nbytes"] == len(raw)
        entry = header["groups"]["projector"][0]
        start = 20 + hlen + entry["offset"]
        stored = torch.frombuffer(bytearray(raw[start:start + entry["nbytes"]]), dtype=torch.float32)
        assert torch.equal(stored.view(entry["shape"]), model.state_dict()[entry["name"]])

    def test_round_trip_reproduces_evaluation(self, tiny_pairs, tmp_path):
        rec, model, vocab = train(tiny_config(out_dir=str(tmp_path / "a"), steps=8), tiny_pairs)
        r1, res1 = evaluate(rec.checkpoint, pairs=tiny_pairs)
        ck = read_checkpoint(rec.checkpoint)
        path = save_checkpoint(tmp_path / "b.ckpt", load_model(rec.checkpoint)[0], ck.config, ck.seed,
                               ck.vocabulary, ck.meta)
        r2, res2 = evaluate(path, pairs=tiny_pairs)
        assert res1 == res2 and r1.to_json() == r2.to_json()
        assert (tmp_path / "b.ckpt").read_bytes() == (tmp_path / "a" / "model.ckpt").read_bytes()

    def test_config_mismatch(self, tiny_pairs, tmp_path):
        rec, _, vocab = train(tiny_config(out_dir=str(tmp_path)), tiny_pairs)
        other = DiffCaptioner(tiny_config(mdp_enabled=False).model_config(len(vocab)))
        with pytest.raises(CheckpointError, match="mismatch"):
            load_into(other, read_checkpoint(rec.checkpoint))

    def test_bad_file(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint at all")
        with pytest.raises(CheckpointError):
            read_checkpoint(tmp_path / "x.ckpt")

    def test_truncated(self, tiny_pairs, tmp_path):
        rec = train(tiny_config(out_dir=str(tmp_path)), tiny_pairs)[0]
        raw = (tmp_path / "model.ckpt").read_bytes()
        (tmp_path / "cut.ckpt").write_bytes(raw[:-10])
        with pytest.raises(CheckpointError, match="truncated"):
            read_checkpoint(tmp_path / "cut.ckpt")

    def test_lora_group_and_init_checkpoint(self, tiny_pairs, tmp_path):
        base = train(tiny_config(out_dir=str(tmp_path / "base")), tiny_pairs)[0]
        cfg = tiny_config(out_dir=str(tmp_path / "lora"), lora_enabled=True, init_checkpoint=base.checkpoint)
        rec, model, _ = train(cfg, tiny_pairs)
        ck = read_checkpoint(rec.checkpoint)
        assert ck.tensors["lora"] and all(".lora_" in n for n in ck.tensors["lora"])
        init = read_checkpoint(base.checkpoint).tensors["decoder"]
        for name, t in ck.tensors["decoder"].items():
            assert torch.equal(t, init[name.replace(".base.", ".")])


class TestEvaluate:
    def test_empty_split(self, tiny_pairs, tmp_path):
        rec = train(tiny_config(out_dir=str(tmp_path)), tiny_pairs)[0]
        with pytest.raises(EvaluationError, match="empty"):
            evaluate(rec.checkpoint, pairs=[])

    def test_outputs_cover_split(self, tiny_pairs, tmp_path):
        rec = train(tiny_config(out_dir=str(tmp_path)), tiny_pairs)[0]
        report, results = evaluate(rec.checkpoint, pairs=tiny_pairs, out_dir=tmp_path / "ev",
                                   strategy="beam", beam=2)
        ids = sorted(p.id for p in tiny_pairs)
        assert sorted(r["id"] for r in results) == ids
        assert sorted(report.per_instance["ciderD"]) == ids
        saved = json.loads((tmp_path / "ev" / "report.json").read_text())
        assert saved["config"] == rec.config and saved["strategy"] == "beam"
        assert set(METRICS) <= set(saved["report"]["scores"])


class TestOverfit:
    def test_loss_and_exact_match(self, overfit_run):
        rec = overfit_run["record"]
        assert len(rec.loss_trace) <= 300
        assert rec.loss_trace[-1] < 0.1
        exact = sum(c == p.captions[0] for c, p in zip(overfit_run["captions"], overfit_run["pairs"]))
        assert exact / len(overfit_run["pairs"]) >= 0.9

    def test_evaluation_on_training_set(self, overfit_run):
        report, results = evaluate(overfit_run["record"].checkpoint, pairs=overfit_run["pairs"], split="train")
        assert report.scores["bleu4"] > 0.9
        assert [r["caption"] for r in results] == overfit_run["captions"]


def test_ablation_table(tmp_path):
    build_corpus(tmp_path / "data", 40, seed=2, distractors=True)
    base = tiny_config(data_dir=str(tmp_path / "data"), out_dir=str(tmp_path / "abl"), steps=3)
    res = ablate(base, [1, 2])
    assert len(res.rows) == 4
    assert {(r["arm"], r["seed"]) for r in res.rows} == {(a, s) for a in ("with_mdp", "without_mdp") for s in (1, 2)}
    assert all(set(METRICS) <= set(r) for r in res.rows)
    model = DiffCaptioner(base.model_config(10))
    assert res.mdp_group_size == sum(p.numel() for p in model.mdp.parameters())
    assert res.parameter_counts["with_mdp"] - res.parameter_counts["without_mdp"] == res.mdp_group_size
    table = (tmp_path / "abl" / "ablation.md").read_text()
    assert table.count("\n") == 2 + 4 + 2 + 1
    with pytest.raises(ConfigError):
        ablate(base, [])


@pytest.mark.parametrize("patch", [
    lambda h: h.pop("vocabulary"),
    lambda h: h["groups"].update(extra=[]),
    lambda h: h["groups"]["projector"][0].update(dtype="<f2"),
])
def test_header_validation(patch, tiny_pairs, tmp_path):
    rec = train(tiny_config(out_dir=str(tmp_path)), tiny_pairs)[0]
    raw = (tmp_path / "model.ckpt").read_bytes()
    _, hlen = struct.unpack("<IQ", raw[8:20])
    header = json.loads(raw[20:20 + hlen])
    patch(header)
    hb = json.dumps(header, sort_keys=True).encode()
    (tmp_path / "bad.ckpt").write_bytes(MAGIC + struct.pack("<IQ", 1, len(hb)) + hb + raw[20 + hlen:])
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "bad.ckpt")

"""Toy training stages and decoding glue.

Each stage is deterministic given (seed, config, dataset): batches are drawn
from labeled Rng splits, every run writes a JSONL step log plus a resolved
config snapshot next to its checkpoint, and checkpoints are flat float64
binaries with a JSON sidecar (tensorcore.save_params).

The instruction stage trains the patch encoder, the projection head, and the
decoder end to end by default; --freeze-encoder leaves the encoder fixed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import diagram_synth as ds
from . import eval_harness as eh
from . import formal_lang as fl
from . import gsformer as gsf
from . import pretrain as pt
from . import solver
from . import tensorcore as tc
from .tensorcore import Adam, Rng, Tensor

STAGES = ("mae", "lm", "align", "sft")


@dataclass
class StageConfig:
    steps: int
    batch: int
    lr: float
    freeze_encoder: bool = False

    def to_json(self) -> dict:
        return self.__dict__.copy()


DEFAULT_STAGES = {
    "mae": StageConfig(steps=500, batch=16, lr=1e-2),
    "lm": StageConfig(steps=300, batch=8, lr=3e-3),
    "align": StageConfig(steps=300, batch=8, lr=1e-3),
    "sft": StageConfig(steps=1500, batch=8, lr=1e-3),
}


@dataclass
class RunConfig:
    gsformer: gsf.GSFormerConfig
    decoder: pt.DecoderConfig
    mae: pt.MAEConfig
    stages: dict[str, StageConfig] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "schema": 1,
            "gsformer": self.gsformer.to_json(),
            "decoder": self.decoder.to_json(),
            "mae": self.mae.to_json(),
            "stages": {k: v.to_json() for k, v in self.stages.items()},
        }


def default_run_config(vocab_size: int, n_patches: int, patch_dim: int) -> RunConfig:
    return RunConfig(
        gsformer=gsf.GSFormerConfig(
            vocab_size=vocab_size, n_patches=n_patches, d_in=patch_dim,
        ),
        decoder=pt.DecoderConfig(vocab_size=vocab_size),
        mae=pt.MAEConfig(patch_dim=patch_dim, n_patches=n_patches),
        stages={k: StageConfig(**v.to_json()) for k, v in DEFAULT_STAGES.items()},
    )


def resolve_run_config(
    base: RunConfig, file_config: dict | None, overrides: dict | None = None
) -> RunConfig:
    """Layer a config file and flag overrides over the dataset defaults."""
    if file_config is not None:
        if file_config.get("schema") != 1:
            raise eh.SchemaError(
                f"unsupported config schema: {file_config.get('schema')!r}"
            )
        if "gsformer" in file_config:
            base.gsformer = gsf.GSFormerConfig.from_json(
                {**base.gsformer.to_json(), **file_config["gsformer"]}
            )
        if "decoder" in file_config:
            base.decoder = pt.DecoderConfig.from_json(
                {**base.decoder.to_json(), **file_config["decoder"]}
            )
        if "mae" in file_config:
            base.mae = pt.MAEConfig.from_json(
                {**base.mae.to_json(), **file_config["mae"]}
            )
        for stage, rec in file_config.get("stages", {}).items():
            if stage not in STAGES:
                raise eh.SchemaError(f"unknown stage {stage!r} in config")
            base.stages[stage] = StageConfig(
                **{**base.stages[stage].to_json(), **rec}
            )
    for key, value in (overrides or {}).items():
        stage, _, fieldname = key.partition(".")
        if stage in base.stages and fieldname:
            setattr(base.stages[stage], fieldname, value)
    base.gsformer.validate()
    return base


# ---------------------------------------------------------------------------
# Dataset access
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    root: Path
    problems: list[solver.ProblemRecord]
    vocab: fl.Vocab
    patches: dict[str, Tensor]

    @property
    def patch_dim(self) -> int:
        return next(iter(self.patches.values())).shape[1]

    @property
    def n_patches(self) -> int:
        return next(iter(self.patches.values())).shape[0]


def load_dataset(root: str | Path, patch: int = 8) -> Dataset:
    root = Path(root)
    problems = solver.load_problems(root / "problems.jsonl")
    vocab_path = root / "vocab.txt"
    vocab = fl.Vocab.load(vocab_path) if vocab_path.exists() else ds.default_vocab()
    patches: dict[str, Tensor] = {}
    for rec in problems:
        if rec.diagram is None:
            raise eh.SchemaError(f"problem {rec.id} has no diagram path")
        pixels = ds.read_pgm(root / rec.diagram)
        patches[rec.id] = ds.patchify(ds.Diagram(pixels, patch))
    return Dataset(root, problems, vocab, patches)


def _caption_ids(rec: solver.ProblemRecord, vocab: fl.Vocab) -> list[int]:
    flat = " ".join(rec.caption.split())
    return [fl.BOS_ID] + fl.tokenize(flat, vocab) + [fl.EOS_ID]


def _program_ids(rec: solver.ProblemRecord, vocab: fl.Vocab) -> list[int]:
    return fl.tokenize(rec.gt_program, vocab) + [fl.EOS_ID]


def _write_snapshot(prefix: Path, config: RunConfig, seed: int, stage: str) -> None:
    payload = config.to_json()
    payload["seed"] = seed
    payload["stage"] = stage
    prefix.with_suffix(".config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


class _StepLog:
    def __init__(self, prefix: Path):
        self.path = prefix.with_suffix(".log.jsonl")
        self._fh = open(self.path, "w", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.close()


def _sample_indices(rng: Rng, n: int, batch: int) -> list[int]:
    return [int(i) for i in rng.integers(0, n, (min(batch, n),))]


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def train_mae_stage(
    data: Dataset, config: RunConfig, seed: int, out_prefix: str | Path
) -> dict:
    """Fit the reconstruction objective on one seed-fixed mask per diagram
    (the desk-scale analogue of memorizing a repeated sequence)."""
    prefix = Path(out_prefix)
    stage = config.stages["mae"]
    rng = Rng(seed)
    params = pt.init_mae_params(config.mae, rng.split("init"))
    opt = Adam(params, lr=stage.lr)
    order = sorted(data.patches)
    masked = {
        pid: pt.mae_mask(data.patches[pid], config.mae.mask_ratio,
                         rng.split(f"mask/{pid}"))
        for pid in order
    }

    def dataset_loss() -> float:
        with tc.no_grad():
            values = [
                pt.mae_loss(pt.mae_forward(params, config.mae, masked[pid]),
                            data.patches[pid], masked[pid]).item()
                for pid in order
            ]
        return sum(values) / len(values)

    init_loss = dataset_loss()
    steps_log = _StepLog(prefix)
    final = None
    for step in range(stage.steps):
        step_rng = rng.split(f"step{step}")
        picks = _sample_indices(step_rng.split("batch"), len(order), stage.batch)
        opt.zero_grad()
        total = None
        for index in picks:
            pid = order[index]
            batch = masked[pid]
            loss = pt.mae_loss(pt.mae_forward(params, config.mae, batch),
                               data.patches[pid], batch)
            total = loss if total is None else tc.add(total, loss)
        total = tc.mul(total, Tensor(1.0 / len(picks)))
        total.backward()
        opt.step()
        final = total.item()
        steps_log.write({"step": step, "loss": final})
    steps_log.close()
    tc.save_params(params, prefix)
    _write_snapshot(prefix, config, seed, "mae")
    return {"stage": "mae", "steps": stage.steps, "init_loss": init_loss,
            "final_loss": dataset_loss(), "last_batch_loss": final}


def train_lm_stage(
    data: Dataset, config: RunConfig, seed: int, out_prefix: str | Path
) -> dict:
    prefix = Path(out_prefix)
    stage = config.stages["lm"]
    rng = Rng(seed)
    params = pt.init_decoder_params(config.decoder, rng.split("init"))
    sequences = []
    for rec in data.problems:
        sequences.append(_caption_ids(rec, data.vocab))
        sequences.append([fl.BOS_ID] + _program_ids(rec, data.vocab))
    opt = Adam(params, lr=stage.lr)
    steps_log = _StepLog(prefix)
    final = None
    for step in range(stage.steps):
        picks = _sample_indices(
            rng.split(f"step{step}"), len(sequences), stage.batch
        )
        opt.zero_grad()
        total = None
        for index in picks:
            loss = pt.lm_loss(params, config.decoder, sequences[index])
            total = loss if total is None else tc.add(total, loss)
        total = tc.mul(total, Tensor(1.0 / len(picks)))
        total.backward()
        opt.step()
        final = total.item()
        steps_log.write({"step": step, "loss": final})
    steps_log.close()
    tc.save_params(params, prefix)
    _write_snapshot(prefix, config, seed, "lm")
    return {"stage": "lm", "steps": stage.steps, "final_loss": final}


def train_align_stage(
    data: Dataset, config: RunConfig, seed: int, out_prefix: str | Path
) -> dict:
    prefix = Path(out_prefix)
    stage = config.stages["align"]
    rng = Rng(seed)
    params = gsf.init_params(config.gsformer, rng.split("init"))
    pairs = [
        (data.patches[rec.id], _caption_ids(rec, data.vocab))
        for rec in data.problems
    ]
    opt = Adam(params, lr=stage.lr)
    steps_log = _StepLog(prefix)
    final = None
    for step in range(stage.steps):
        step_rng = rng.split(f"step{step}")
        picks = _sample_indices(step_rng.split("batch"), len(pairs), stage.batch)
        batch = [pairs[i] for i in picks]
        step_cfg = replace(
            config.gsformer,
            tau=config.gsformer.tau_at(step, stage.steps),
        )
        opt.zero_grad()
        out = gsf.pretrain_loss(
            batch, step_cfg, params, step_rng.split("noise"), hard=False
        )
        out.tensor.backward()
        opt.step()
        final = out.l_total
        steps_log.write({"step": step, "tau": step_cfg.tau, **out.to_json()})
    steps_log.close()
    tc.save_params(params, prefix)
    _write_snapshot(prefix, config, seed, "align")
    return {"stage": "align", "steps": stage.steps, "final_loss": final}


def _join_sft_params(gs, dec, proj_w, proj_b):
    joined = {f"gs.{k}": v for k, v in gs.items()}
    joined.update({f"dec.{k}": v for k, v in dec.items()})
    joined["proj_w"] = proj_w
    joined["proj_b"] = proj_b
    return joined


def split_sft_params(joined: dict[str, Tensor]):
    gs = {k[3:]: v for k, v in joined.items() if k.startswith("gs.")}
    dec = {k[4:]: v for k, v in joined.items() if k.startswith("dec.")}
    return gs, dec, joined["proj_w"], joined["proj_b"]


def train_sft_stage(
    data: Dataset,
    config: RunConfig,
    seed: int,
    out_prefix: str | Path,
    encoder_ckpt: str | Path | None = None,
) -> dict:
    """End-to-end instruction tuning: encoder -> projection -> decoder."""
    prefix = Path(out_prefix)
    stage = config.stages["sft"]
    rng = Rng(seed)
    if encoder_ckpt is not None:
        gs_params = tc.load_params(encoder_ckpt)
    else:
        gs_params = gsf.init_params(config.gsformer, rng.split("gs_init"))
    dec_params = pt.init_decoder_params(config.decoder, rng.split("dec_init"))
    proj_rng = rng.split("proj")
    proj_w = Tensor(
        proj_rng.normal((config.gsformer.d_model, config.decoder.d_lm),
                        std=gsf.INIT_STD),
        requires_grad=True,
    )
    proj_b = tc.zeros((config.decoder.d_lm,), requires_grad=True)

    trainable = _join_sft_params(
        {} if stage.freeze_encoder else gs_params, dec_params, proj_w, proj_b
    )
    opt = Adam(trainable, lr=stage.lr)
    examples = [
        (data.patches[rec.id], rec.question_tokens,
         _program_ids(rec, data.vocab))
        for rec in data.problems
    ]
    steps_log = _StepLog(prefix)
    final_sum = final_mean = None
    for step in range(stage.steps):
        step_rng = rng.split(f"step{step}")
        picks = _sample_indices(step_rng.split("batch"), len(examples), stage.batch)
        opt.zero_grad()
        total = None
        n_targets = 0
        for slot, index in enumerate(picks):
            patches, t_p, s = examples[index]
            feats, _, _ = gsf.gs_former_forward(
                patches, [], config.gsformer, gs_params,
                step_rng.split(f"noise{slot}"), hard=False,
            )
            t_g = pt.project_visual(feats.f_g, proj_w, proj_b)
            loss = pt.instruction_loss(dec_params, config.decoder, t_g, t_p, s)
            total = loss if total is None else tc.add(total, loss)
            n_targets += len(s)
        mean = tc.mul(total, Tensor(1.0 / n_targets))
        mean.backward()
        opt.step()
        final_sum = total.item()
        final_mean = mean.item()
        steps_log.write({"step": step, "loss_sum": final_sum,
                         "loss_mean": final_mean})
    steps_log.close()
    tc.save_params(_join_sft_params(gs_params, dec_params, proj_w, proj_b), prefix)
    _write_snapshot(prefix, config, seed, "sft")
    return {"stage": "sft", "steps": stage.steps,
            "final_loss_sum": final_sum, "final_loss_mean": final_mean}


def run_stage(
    stage: str,
    data: Dataset,
    config: RunConfig,
    seed: int,
    out_prefix: str | Path,
    encoder_ckpt: str | Path | None = None,
) -> dict:
    if stage == "mae":
        return train_mae_stage(data, config, seed, out_prefix)
    if stage == "lm":
        return train_lm_stage(data, config, seed, out_prefix)
    if stage == "align":
        return train_align_stage(data, config, seed, out_prefix)
    if stage == "sft":
        return train_sft_stage(data, config, seed, out_prefix, encoder_ckpt)
    raise ValueError(f"unknown stage {stage!r}")


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def load_sft_checkpoint(prefix: str | Path):
    prefix = Path(prefix)
    snapshot = json.loads(prefix.with_suffix(".config.json").read_text())
    gs_cfg = gsf.GSFormerConfig.from_json(snapshot["gsformer"])
    dec_cfg = pt.DecoderConfig.from_json(snapshot["decoder"])
    joined = tc.load_params(prefix, requires_grad=False)
    gs_params, dec_params, proj_w, proj_b = split_sft_params(joined)
    return gs_cfg, dec_cfg, gs_params, dec_params, proj_w, proj_b


def decode_problems(
    ckpt_prefix: str | Path,
    data: Dataset,
    beam: int = 10,
    max_len: int = 24,
) -> list[tuple[str, list[str]]]:
    """Hard-mask, noise-free decoding of every problem; rng-free."""
    gs_cfg, dec_cfg, gs_params, dec_params, proj_w, proj_b = \
        load_sft_checkpoint(ckpt_prefix)
    results = []
    with tc.no_grad():
        for rec in data.problems:
            feats, _, _ = gsf.gs_former_forward(
                data.patches[rec.id], [], gs_cfg, gs_params, None, hard=True
            )
            t_g = pt.project_visual(feats.f_g, proj_w, proj_b)
            hyps = pt.beam_decode(
                dec_params, dec_cfg, t_g, rec.question_tokens,
                beam=beam, max_len=max_len, eos_id=fl.EOS_ID,
            )
            texts = [
                fl.detokenize([t for t in h.token_ids if t != fl.EOS_ID],
                              data.vocab)
                for h in hyps
            ]
            results.append((rec.id, texts))
    return results


def adjudicate(
    problems: list[solver.ProblemRecord],
    candidates: dict[str, list[str]],
    beam: int,
    tol: eh.Tolerance,
) -> list[eh.Pair]:
    pairs: list[eh.Pair] = []
    for rec in problems:
        texts = candidates.get(rec.id, [])[:beam]
        outcome = solver.evaluate_beam(
            texts, solver.Bindings.from_numbers(rec.numbers), rec.answer, tol
        )
        pairs.append((rec, outcome))
    return pairs

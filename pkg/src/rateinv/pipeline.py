"""Pipeline stages behind the CLI: synth, augment, featurize, train, extract,
score, report. Every stage is idempotent for an unchanged config and inputs
(a content hash is stamped per stage and reruns are skipped), and all outputs
live under the experiment work directory.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from . import config as config_mod
from .backend import (
    CosineBackend,
    eer_from_scored,
    extract_embeddings,
    format_three_rate_table,
    rate_sweep_report,
    score_trials,
    train_plda,
    write_scores,
)
from .corpus import (
    RATE_LABELS,
    make_record,
    make_trials,
    random_profiles,
    read_manifest,
    save_wav,
    synth_utterance,
    write_manifest,
    write_trials,
)
from .errors import ConfigError, DataError
from .features import (
    FeatureArchive,
    FeatureArchiveWriter,
    VadConfig,
    extract_features,
)
from .losses import LossConfig
from .model import ModelConfig, load_checkpoint
from .trainer import AdversarialSchedule, TrainerConfig, run_training
from .tsm import AugmentationPlan, TsmConfig, augment_corpus, plan_voxceleb_style

log = logging.getLogger(__name__)

STAGES = ("synth", "augment", "featurize", "train", "extract", "score", "report")


class Paths:
    """Canonical artifact layout under one experiment work directory."""

    def __init__(self, workdir, corpus_root: str):
        self.workdir = Path(workdir)
        root = Path(corpus_root)
        self.corpus = root if root.is_absolute() else self.workdir / root
        self.train_manifest = self.workdir / "train.tsv"
        self.test_manifest = self.workdir / "test.tsv"
        self.train_aug_manifest = self.workdir / "train_aug.tsv"
        self.test_aug_manifest = self.workdir / "test_aug.tsv"
        self.aug_delta = self.workdir / "aug_delta.tsv"
        self.features = self.workdir / "feats.bin"
        self.features_skipped = self.workdir / "features_skipped.txt"
        self.checkpoint = self.workdir / "checkpoint.npz"
        self.train_log = self.workdir / "train.log"
        self.embeddings = self.workdir / "embeddings.bin"
        self.extract_skipped = self.workdir / "extract_skipped.txt"
        self.trials_dir = self.workdir / "trials"
        self.scores_dir = self.workdir / "scores"
        self.report_table = self.workdir / "report" / "eer_table.txt"
        self.report_plot = self.workdir / "report" / "eer_plot.png"
        self.stamps = self.workdir / ".stamps"


def _digest(sections: dict, files: list[Path]) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(sections, sort_keys=True).encode())
    for f in sorted(files):
        h.update(str(f.name).encode())
        if f.exists():
            h.update(f.read_bytes())
        else:
            h.update(b"<missing>")
    return h.hexdigest()


def _up_to_date(paths: Paths, stage: str, digest: str, outputs: list[Path]) -> bool:
    stamp = paths.stamps / f"{stage}.json"
    if not stamp.exists() or not all(p.exists() for p in outputs):
        return False
    try:
        return json.loads(stamp.read_text())["digest"] == digest
    except (json.JSONDecodeError, KeyError):
        return False


def _write_stamp(paths: Paths, stage: str, digest: str) -> None:
    paths.stamps.mkdir(parents=True, exist_ok=True)
    (paths.stamps / f"{stage}.json").write_text(json.dumps({"digest": digest}))


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise DataError(f"missing {path.name}; run the '{producer}' stage first")
    return path


def _tsm_config(cfg: dict) -> TsmConfig:
    t = cfg["tsm"]
    return TsmConfig(t["frame_length"], t["synthesis_hop"], t["search_tolerance"])


def _plan(cfg: dict, n_originals: int) -> AugmentationPlan:
    plan = cfg["tsm"]["plan"]
    if plan == "voxceleb":
        return plan_voxceleb_style(n_originals)
    return AugmentationPlan(tuple((a, f) for a, f in plan))


def _model_config(cfg: dict, n_speakers: int) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        n_speakers=n_speakers,
        channels=m["channels"],
        embed_dim=m["embed_dim"],
        map_dim=m["map_dim"],
        bottleneck_ratio=m["bottleneck_ratio"],
        decomposition=config_mod.resolved_system(cfg)["decomposition"],
    )


def stage_synth(cfg: dict, paths: Paths, force: bool = False) -> None:
    """Generate the synthetic corpus and the train/test origin manifests."""
    c = cfg["corpus"]
    digest = _digest({"corpus": c, "seed": cfg["seed"]}, [])
    outputs = [paths.train_manifest, paths.test_manifest]
    if not force and _up_to_date(paths, "synth", digest, outputs):
        log.info("synth: up to date; skipping")
        return
    rng = np.random.default_rng([cfg["seed"], 101])
    profiles = random_profiles(c["n_speakers"], seed=cfg["seed"])
    n_test = c["test_speakers"]
    train_records, test_records = [], []
    for i, profile in enumerate(profiles):
        spk = f"spk{i:03d}"
        is_test = i >= c["n_speakers"] - n_test
        spk_dir = paths.corpus / spk
        spk_dir.mkdir(parents=True, exist_ok=True)
        for j in range(c["utts_per_speaker"]):
            duration = float(rng.uniform(c["duration_lo"], c["duration_hi"]))
            syllable_rate = float(rng.uniform(c["syllable_lo"], c["syllable_hi"]))
            clip = synth_utterance(profile, duration, syllable_rate, seed=int(rng.integers(2**31)))
            utt_id = f"{spk}_u{j:02d}"
            wav_path = spk_dir / f"{utt_id}.wav"
            save_wav(wav_path, clip)
            record = make_record(utt_id, spk, wav_path, 1.0)
            (test_records if is_test else train_records).append(record)
    paths.workdir.mkdir(parents=True, exist_ok=True)
    write_manifest(train_records, paths.train_manifest)
    write_manifest(test_records, paths.test_manifest)
    _write_stamp(paths, "synth", digest)
    log.info("synth: %d train + %d test utterances", len(train_records), len(test_records))


def stage_augment(cfg: dict, paths: Paths, force: bool = False) -> None:
    """Stretch training subsets per the plan and build full per-alpha test copies."""
    _require(paths.train_manifest, "synth")
    _require(paths.test_manifest, "synth")
    digest = _digest(
        {"tsm": cfg["tsm"], "eval": cfg["eval"], "seed": cfg["seed"]},
        [paths.train_manifest, paths.test_manifest],
    )
    outputs = [paths.train_aug_manifest, paths.test_aug_manifest, paths.aug_delta]
    if not force and _up_to_date(paths, "augment", digest, outputs):
        log.info("augment: up to date; skipping")
        return
    tsm_cfg = _tsm_config(cfg)
    train_records = read_manifest(paths.train_manifest)
    plan = _plan(cfg, len(train_records))
    result = augment_corpus(train_records, plan, tsm_cfg, seed=cfg["tsm"]["plan_seed"])
    for err in result.errors:
        log.warning("augment: %s", err)
    write_manifest(result.records, paths.train_aug_manifest)
    write_manifest(result.new_records, paths.aug_delta)

    test_records = read_manifest(paths.test_manifest)
    test_alphas = sorted({float(a) for a in cfg["eval"]["test_alphas"] if abs(a - 1.0) > 1e-9})
    test_all = list(test_records)
    for alpha in test_alphas:
        res = augment_corpus(test_records, AugmentationPlan(((alpha, 1.0),)), tsm_cfg, seed=0)
        for err in res.errors:
            log.warning("augment(test, alpha=%g): %s", alpha, err)
        test_all.extend(res.new_records)
    write_manifest(test_all, paths.test_aug_manifest)
    _write_stamp(paths, "augment", digest)
    log.info(
        "augment: %d train (+%d) / %d test records",
        len(result.records), len(result.new_records), len(test_all),
    )


def stage_featurize(cfg: dict, paths: Paths, force: bool = False) -> None:
    """MFCC + VAD + sliding CMN for every train/test utterance into one archive."""
    _require(paths.train_aug_manifest, "augment")
    _require(paths.test_aug_manifest, "augment")
    digest = _digest(
        {"features": cfg["features"]},
        [paths.train_aug_manifest, paths.test_aug_manifest],
    )
    outputs = [paths.features, Path(str(paths.features) + ".idx")]
    if not force and _up_to_date(paths, "featurize", digest, outputs):
        log.info("featurize: up to date; skipping")
        return
    from .corpus import load_wav

    f = cfg["features"]
    vad_cfg = VadConfig(f["vad_mean_offset"], f["vad_energy_floor"])
    records = read_manifest(paths.train_aug_manifest) + read_manifest(paths.test_aug_manifest)
    skipped = []
    with FeatureArchiveWriter(paths.features) as writer:
        for r in records:
            try:
                clip = load_wav(r.path)
                feats = extract_features(clip, r.utt_id, vad_cfg, f["cmn_window"])
            except DataError as exc:
                skipped.append(f"{r.utt_id}\t{exc}")
                continue
            writer.write(r.utt_id, feats.frames)
    paths.features_skipped.write_text("\n".join(skipped) + ("\n" if skipped else ""))
    if skipped:
        log.warning("featurize: skipped %d utterances (see %s)", len(skipped), paths.features_skipped)
    _write_stamp(paths, "featurize", digest)
    log.info("featurize: %d utterances archived", len(records) - len(skipped))


def _training_manifest(cfg: dict, paths: Paths) -> Path:
    preset = config_mod.resolved_system(cfg)
    if preset["train_data"] == "originals":
        return paths.train_manifest
    return paths.train_aug_manifest


def stage_train(cfg: dict, paths: Paths, force: bool = False) -> None:
    """Train the configured system preset; writes checkpoint and training log."""
    manifest = _require(_training_manifest(cfg, paths), "augment")
    _require(paths.features, "featurize")
    preset = config_mod.resolved_system(cfg)
    sections = {
        "model": cfg["model"], "loss": cfg["loss"], "trainer": cfg["trainer"],
        "system": cfg["system"], "seed": cfg["seed"], "preset": preset,
    }
    digest = _digest(sections, [manifest, paths.features])
    outputs = [paths.checkpoint, paths.train_log]
    if not force and _up_to_date(paths, "train", digest, outputs):
        log.info("train: up to date; skipping")
        return
    records = read_manifest(manifest)
    features = FeatureArchive(paths.features)
    speakers = sorted({r.speaker_id for r in records})
    model_cfg = _model_config(cfg, len(speakers))
    t = cfg["trainer"]
    trainer_cfg = TrainerConfig(
        steps=t["steps"],
        batch_size=t["batch_size"],
        chunk_frames=t["chunk_frames"],
        learning_rate=t["learning_rate"],
        momentum=t["momentum"],
        schedule=AdversarialSchedule(t["max_phase_iters"], t["min_phase_iters"]),
        adversarial=preset["adversarial"],
        min_frames=t["min_frames"],
        monitor_batch_size=t["monitor_batch_size"],
    )
    loss_cfg = LossConfig(
        lambda1=preset["lambda1"],
        lambda2=preset["lambda2"],
        am_scale=cfg["loss"]["am_scale"],
        am_margin=cfg["loss"]["am_margin"],
        epsilon=cfg["loss"]["epsilon"],
    )
    run_training(
        records, features, model_cfg, trainer_cfg, loss_cfg,
        seed=cfg["seed"],
        log_path=paths.train_log,
        checkpoint_path=paths.checkpoint,
    )
    _write_stamp(paths, "train", digest)
    log.info("train: %s preset finished (%d steps)", cfg["system"], t["steps"])


def stage_extract(cfg: dict, paths: Paths, force: bool = False) -> None:
    """Identity-branch embeddings for every train and test utterance."""
    _require(paths.checkpoint, "train")
    _require(paths.features, "featurize")
    manifest = _require(_training_manifest(cfg, paths), "augment")
    digest = _digest({}, [paths.checkpoint, manifest, paths.test_aug_manifest])
    outputs = [paths.embeddings, Path(str(paths.embeddings) + ".idx")]
    if not force and _up_to_date(paths, "extract", digest, outputs):
        log.info("extract: up to date; skipping")
        return
    params, _ = load_checkpoint(paths.checkpoint)
    features = FeatureArchive(paths.features)
    records = read_manifest(manifest) + read_manifest(paths.test_aug_manifest)
    embeddings, skipped = extract_embeddings(params, records, features)
    with FeatureArchiveWriter(paths.embeddings) as writer:
        for utt_id, vec in embeddings.vectors.items():
            writer.write(utt_id, vec[None, :])
    paths.extract_skipped.write_text("\n".join(skipped) + ("\n" if skipped else ""))
    if skipped:
        log.warning("extract: skipped %d utterances", len(skipped))
    _write_stamp(paths, "extract", digest)
    log.info("extract: %d embeddings", len(embeddings))


def _load_embeddings(paths: Paths) -> dict[str, np.ndarray]:
    archive = FeatureArchive(paths.embeddings)
    return {utt: archive[utt][0] for utt in archive.keys()}


def _eval_conditions(cfg: dict, test_records) -> list[tuple[str, str, object]]:
    """(condition name, enroll selector, test selector) tuples per protocol."""
    ev = cfg["eval"]
    if ev["protocol"] == "sweep":
        return [
            (f"a{float(a):g}", ev["enroll_rate"], float(a))
            for a in sorted({float(a) for a in ev["test_alphas"]})
        ]
    present = [r for r in RATE_LABELS if any(rec.rate_label == r for rec in test_records)]
    return [(rate, rate, rate) for rate in present]


def stage_score(cfg: dict, paths: Paths, force: bool = False) -> None:
    """Train the scoring backend, build per-condition trials, score them."""
    _require(paths.embeddings, "extract")
    manifest = _require(_training_manifest(cfg, paths), "augment")
    digest = _digest({"eval": cfg["eval"]}, [paths.embeddings, manifest, paths.test_aug_manifest])
    outputs = [paths.trials_dir, paths.scores_dir]
    if not force and _up_to_date(paths, "score", digest, outputs):
        log.info("score: up to date; skipping")
        return
    vectors = _load_embeddings(paths)
    train_records = [r for r in read_manifest(manifest) if r.utt_id in vectors]
    test_records = [r for r in read_manifest(paths.test_aug_manifest) if r.utt_id in vectors]
    ev = cfg["eval"]
    if ev["backend"] == "plda":
        groups: dict[str, list[np.ndarray]] = {}
        for r in train_records:
            groups.setdefault(r.speaker_id, []).append(vectors[r.utt_id])
        backend = train_plda(groups, n_iter=ev["plda_iters"], length_norm=ev["length_norm"])
    else:
        backend = CosineBackend()
    paths.trials_dir.mkdir(parents=True, exist_ok=True)
    paths.scores_dir.mkdir(parents=True, exist_ok=True)
    from .backend import EmbeddingSet

    emb = EmbeddingSet(vectors)
    for name, enroll_sel, test_sel in _eval_conditions(cfg, test_records):
        trials = make_trials(test_records, enroll_sel, test_sel)
        write_trials(trials, paths.trials_dir / f"trials_{name}.txt")
        scored = score_trials(backend, trials, emb)
        write_scores(scored, paths.scores_dir / f"scores_{name}.txt")
    _write_stamp(paths, "score", digest)
    log.info("score: %s backend over %d conditions", ev["backend"],
             len(_eval_conditions(cfg, test_records)))


def stage_report(cfg: dict, paths: Paths, force: bool = False) -> str:
    """EER per condition as an aligned table plus a plot (sweep protocol)."""
    _require(paths.scores_dir, "score")
    score_files = sorted(paths.scores_dir.glob("scores_*.txt"))
    if not score_files:
        raise DataError("no score files found; run the 'score' stage first")
    digest = _digest({"eval": cfg["eval"], "system": cfg["system"]},
                     list(score_files) + sorted(paths.trials_dir.glob("trials_*.txt")))
    outputs = [paths.report_table]
    if not force and _up_to_date(paths, "report", digest, outputs):
        log.info("report: up to date; skipping")
        return paths.report_table.read_text()
    from .backend import ScoredTrial
    from .corpus import read_trials

    eers: dict[str, float] = {}
    for sf in score_files:
        name = sf.stem.replace("scores_", "")
        trials = read_trials(paths.trials_dir / f"trials_{name}.txt")
        targets = {(t.enroll, t.test): t.target for t in trials}
        scored = []
        with open(sf, "r", encoding="utf-8") as f:
            for line in f:
                enroll, test, score = line.split()
                scored.append(ScoredTrial(enroll, test, targets[(enroll, test)], float(score)))
        eers[name] = eer_from_scored(scored)[0]
    paths.report_table.parent.mkdir(parents=True, exist_ok=True)
    system = cfg["system"]
    if cfg["eval"]["protocol"] == "sweep":
        by_alpha = {float(name[1:]): v for name, v in eers.items()}
        table = rate_sweep_report({system: by_alpha}, paths.report_table, paths.report_plot)
    else:
        table = format_three_rate_table({system: eers})
        paths.report_table.write_text(table)
    _write_stamp(paths, "report", digest)
    log.info("report written to %s", paths.report_table)
    return table


_STAGE_FUNCS = {
    "synth": stage_synth,
    "augment": stage_augment,
    "featurize": stage_featurize,
    "train": stage_train,
    "extract": stage_extract,
    "score": stage_score,
    "report": stage_report,
}


def run_stage(stage: str, cfg: dict, workdir=None, force: bool = False):
    """Entry point used by the CLI and tests."""
    if stage not in _STAGE_FUNCS:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    paths = Paths(workdir if workdir is not None else cfg["workdir"], cfg["corpus"]["root"])
    paths.workdir.mkdir(parents=True, exist_ok=True)
    return _STAGE_FUNCS[stage](cfg, paths, force=force)

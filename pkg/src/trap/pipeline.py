"""Stage runner behind the command line: train, attack, eval, sweep, report.

Every stage reads and extends ``<out>/manifest.json``, which records the
config hash, the master seed and every derived seed, and a SHA-256 for each
input and artifact. Stage seeds come from the master seed through
:func:`derive_seed`, so no two stages share a random stream.

Output layout::

    models/<name>.ckpt
    attack/<preset>/adv.advb, attack/<preset>/trace.csv
    eval/metrics.json + eval CSVs
    sweep/metrics.json, sweep/asr.csv, sweep/sweep.csv
    report/*.csv, report/plots/*.svg
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import replace
from pathlib import Path

import numpy as np

from trap import attacks, evaluation, report, zoo
from trap.config import ExperimentConfig
from trap.data import Dataset, load_idx_dataset

log = logging.getLogger(__name__)

SUBCOMMANDS = ("train", "attack", "eval", "sweep", "report")
ADV_MAGIC = b"TRAPADVB"
ADV_VERSION = 1
MASK64 = (1 << 64) - 1
SEED_DERIVATION = "splitmix64(master XOR fnv1a64(label)) >> 1"


class PipelineError(RuntimeError):
    pass


class MissingArtifactError(PipelineError):
    def __init__(self, path, stage):
        self.path = Path(path)
        super().__init__(f"missing upstream artifact {path} (run `trap {stage}` first)")


# seed chain


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & MASK64
    return h


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, label: str) -> int:
    """Stage seed for ``label``; 63 bits so it fits signed integer fields."""
    return splitmix64((int(master) ^ fnv1a64(label)) & MASK64) >> 1


# adversarial batch files


def encode_adv_batch(x) -> bytes:
    arr = np.ascontiguousarray(x, dtype="<f4")
    head = ADV_MAGIC + struct.pack("<II", ADV_VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def write_adv_batch(path, x) -> str:
    data = encode_adv_batch(x)
    report.write_atomic(path, data)
    return hashlib.sha256(data).hexdigest()


def read_adv_batch(path, expected_sha256=None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if expected_sha256 is not None and hashlib.sha256(raw).hexdigest() != expected_sha256:
        raise PipelineError(f"{path}: checksum does not match the manifest")
    if raw[:8] != ADV_MAGIC:
        raise PipelineError(f"{path}: bad magic; not a TRAPADVB file")
    if len(raw) < 16:
        raise PipelineError(f"{path}: truncated header")
    version, ndim = struct.unpack("<II", raw[8:16])
    if version != ADV_VERSION:
        raise PipelineError(f"{path}: unsupported version {version}")
    end = 16 + 4 * ndim
    shape = struct.unpack(f"<{ndim}I", raw[16:end])
    if len(raw) - end != 4 * int(np.prod(shape)):
        raise PipelineError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(raw, dtype="<f4", offset=end).astype(np.float32).reshape(shape)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# manifest


class Manifest:
    def __init__(self, out_dir: Path, cfg: ExperimentConfig):
        self.path = out_dir / "manifest.json"
        self.out_dir = out_dir
        if self.path.exists():
            self.data = json.loads(self.path.read_text())
            if self.data["config"]["sha256"] != cfg.hash or self.data["master_seed"] != cfg.seed:
                raise PipelineError(
                    f"{self.path} was written for a different config or seed; use a fresh --out directory"
                )
        else:
            self.data = {
                "config": {"path": str(cfg.path) if cfg.path else None, "sha256": cfg.hash},
                "master_seed": cfg.seed,
                "seed_chain": {"derivation": SEED_DERIVATION, "seeds": {}},
                "inputs": {},
                "artifacts": {},
                "stages": {},
            }

    def seed(self, label: str, master: int) -> int:
        value = derive_seed(master, label)
        self.data["seed_chain"]["seeds"][label] = value
        return value

    def record_input(self, key, path) -> None:
        self.data["inputs"][key] = {"path": str(path), "sha256": sha256_file(path)}

    def record_artifact(self, path, digest=None) -> None:
        rel = Path(path).relative_to(self.out_dir).as_posix()
        self.data["artifacts"][rel] = digest or sha256_file(path)

    def artifact_digest(self, path):
        return self.data["artifacts"].get(Path(path).relative_to(self.out_dir).as_posix())

    def save(self) -> None:
        text = json.dumps(self.data, indent=2, sort_keys=True) + "\n"
        report.write_atomic(self.path, text.encode("utf-8"))


# helpers


def _test_set(cfg, manifest) -> Dataset:
    if cfg.test_images is None or cfg.test_labels is None:
        raise PipelineError("dataset.test_images and dataset.test_labels are required")
    manifest.record_input("dataset.test_images", cfg.test_images)
    manifest.record_input("dataset.test_labels", cfg.test_labels)
    return load_idx_dataset(cfg.test_images, cfg.test_labels, cfg.num_classes).subset(cfg.num_items)


def checkpoint_path(cfg, name) -> Path:
    model = cfg.models[name]
    if model.checkpoint:
        p = Path(model.checkpoint)
        return p if p.is_absolute() else (cfg.path.parent if cfg.path else Path(".")) / p
    return Path(cfg.out_dir) / "models" / f"{name}.ckpt"


def _record_checkpoint(manifest, name, path):
    try:
        manifest.record_artifact(path)
    except ValueError:  # checkpoint lives outside the output directory
        manifest.record_input(f"models.{name}.checkpoint", path)


def _load_model(cfg, name, manifest):
    path = checkpoint_path(cfg, name)
    if not path.exists():
        raise MissingArtifactError(path, "train")
    _record_checkpoint(manifest, name, path)
    return zoo.load_checkpoint(path)


def source_name(cfg) -> str:
    if cfg.source:
        return cfg.source
    if not cfg.models:
        raise PipelineError("no models defined")
    return next(iter(cfg.models))


def target_names(cfg) -> list:
    return list(cfg.targets) if cfg.targets else list(cfg.models)


def destruction_name(cfg) -> str:
    if cfg.destruction_model:
        return cfg.destruction_model
    others = [t for t in target_names(cfg) if t != source_name(cfg)]
    return others[0] if others else source_name(cfg)


def attack_seed(cfg, manifest) -> int:
    if cfg.attack_seed is not None:
        return cfg.attack_seed
    return manifest.seed("attack", cfg.seed)


def family(cfg: attacks.AttackConfig) -> str:
    """Preset name of the reduction family an attack config belongs to."""
    if cfg.t1 >= cfg.T:
        return "ai_mi_fgsm" if cfg.transforms_on else "mi_fgsm"
    if not cfg.transforms_on:
        return "ila" if cfg.beta == 1.0 else "dg_ila"
    return "trap"


def asr_row(source, target, acfg, asr, asr_sub) -> dict:
    return dict(source=source, target=target, preset=family(acfg), **acfg.summary(), asr=asr, asr_benign_subtracted=asr_sub)


def _asr_rows(source, targets, acfg, x, y, x_adv, benign_preds, subtract_benign=True):
    rows = []
    for name, graph in targets.items():
        pred = zoo.predict(graph, x_adv)
        sub = evaluation.success_rate(pred, benign_preds[name], y, subtract_benign=True) if subtract_benign else None
        rows.append(asr_row(source, name, acfg, evaluation.success_rate(pred, None, y), sub))
    return rows


def _trace_rows(trace: attacks.AttackTrace) -> list:
    return [dict(step=r.step, phase=r.phase, mean_loss=float(r.loss), transform_rate=float(r.transform_rate))
            for r in trace.records]


def _read_trace(path) -> list:
    return [dict(step=int(r["step"]), phase=r["phase"], mean_loss=float(r["mean_loss"]),
                 transform_rate=float(r["transform_rate"])) for r in report.read_csv(path)]


# stages


def stage_train(cfg, manifest) -> dict:
    if cfg.train_images is None or cfg.train_labels is None:
        raise PipelineError("dataset.train_images and dataset.train_labels are required for train")
    manifest.record_input("dataset.train_images", cfg.train_images)
    manifest.record_input("dataset.train_labels", cfg.train_labels)
    train = load_idx_dataset(cfg.train_images, cfg.train_labels, cfg.num_classes)
    test = _test_set(cfg, manifest) if cfg.test_images else None
    summary = {}
    for name, m in cfg.models.items():
        if m.seed is None:
            init_seed = manifest.seed(f"train:{name}:init", cfg.seed)
            shuffle_seed = manifest.seed(f"train:{name}:shuffle", cfg.seed)
        else:
            init_seed, shuffle_seed = m.seed, derive_seed(m.seed, "shuffle")
        graph = zoo.build_model(zoo.get_arch(m.arch), init_seed)
        log.info("training %s (%s) for %d epochs", name, m.arch, m.epochs)
        graph, meta = zoo.train_model(graph, train, m.epochs, m.lr, m.momentum, shuffle_seed, m.batch_size, test)
        graph.metadata.update(init_seed=init_seed, shuffle_seed=shuffle_seed)
        path = checkpoint_path(cfg, name)
        path.parent.mkdir(parents=True, exist_ok=True)
        zoo.save_checkpoint(graph, path)
        _record_checkpoint(manifest, name, path)
        summary[name] = dict(arch=m.arch, init_seed=init_seed, shuffle_seed=shuffle_seed,
                             train_accuracy=meta.train_accuracy, test_accuracy=meta.test_accuracy)
    return summary


def adv_path(cfg, preset_name) -> Path:
    return Path(cfg.out_dir) / "attack" / preset_name / "adv.advb"


def stage_attack(cfg, manifest) -> dict:
    test = _test_set(cfg, manifest)
    src = source_name(cfg)
    graph = _load_model(cfg, src, manifest)
    seed = attack_seed(cfg, manifest)
    summary = {}
    for name in cfg.presets:
        acfg = attacks.preset(name, replace(cfg.attack, seed=seed))
        log.info("attack %s on %s, %d items", name, src, len(test))
        x_adv, trace = attacks.run_attack(graph, test.images, test.labels, acfg, chunk_size=cfg.chunk_size)
        path = adv_path(cfg, name)
        manifest.record_artifact(path, write_adv_batch(path, x_adv))
        tpath = path.parent / "trace.csv"
        report.write_csv(tpath, report.TRACE_HEADER, _trace_rows(trace))
        manifest.record_artifact(tpath)
        summary[name] = dict(source=src, config=acfg.summary(), family=family(acfg), flagged=trace.flagged)
    return summary


def stage_eval(cfg, manifest) -> dict:
    test = _test_set(cfg, manifest)
    x, y = test.images, test.labels
    src = source_name(cfg)
    targets = {name: _load_model(cfg, name, manifest) for name in target_names(cfg)}
    source_graph = targets[src] if src in targets else _load_model(cfg, src, manifest)
    dname = destruction_name(cfg)
    dgraph = targets.get(dname) or _load_model(cfg, dname, manifest)
    benign = {name: zoo.predict(g, x) for name, g in targets.items()}
    seed = attack_seed(cfg, manifest)
    noise_seed = manifest.seed("eval:noise", cfg.seed)
    bundle = report.ReportBundle()
    for name in cfg.presets:
        path = adv_path(cfg, name)
        if not path.exists():
            raise MissingArtifactError(path, "attack")
        digest = manifest.artifact_digest(path)
        if digest is None:
            raise PipelineError(f"{path} is not recorded in {manifest.path}; re-run `trap attack`")
        x_adv = read_adv_batch(path, digest)
        if x_adv.shape != x.shape:
            raise PipelineError(f"{path} holds shape {x_adv.shape}, the test subset has {x.shape}")
        acfg = attacks.preset(name, replace(cfg.attack, seed=seed))
        label = family(acfg)
        bundle.asr_rows += _asr_rows(src, targets, acfg, x, y, x_adv, benign, cfg.subtract_benign)
        for i, sigma in enumerate(cfg.noise_levels):
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([noise_seed, i])))
            d = evaluation.destruction_rate(
                dgraph, x, x_adv, y, lambda im: evaluation.corrupt_gaussian_noise(im, sigma, rng))
            bundle.destruction_rows.append(dict(preset=label, corruption="gaussian_noise", level=float(sigma),
                                                rate=d.rate, count=d.count))
        for sigma in cfg.blur_levels:
            d = evaluation.destruction_rate(dgraph, x, x_adv, y, lambda im: evaluation.corrupt_gaussian_blur(im, sigma))
            bundle.destruction_rows.append(dict(preset=label, corruption="gaussian_blur", level=float(sigma),
                                                rate=d.rate, count=d.count))
        layers = cfg.rfd_layers or ["input"] + source_graph.layer_ids
        for lid, value in evaluation.rfd_profile(source_graph, x, x_adv, layers).items():
            bundle.rfd_rows.append(dict(layer_id=lid, method=label, value=value))
        tpath = path.parent / "trace.csv"
        if tpath.exists():
            bundle.traces[name] = _read_trace(tpath)
    eval_dir = Path(cfg.out_dir) / "eval"
    for p in report.emit_report(bundle, eval_dir):
        manifest.record_artifact(p)
    _write_metrics(eval_dir / "metrics.json", bundle, manifest)
    return dict(source=src, targets=list(targets), destruction_model=dname, noise_seed=noise_seed)


def _write_metrics(path, bundle, manifest):
    data = dict(asr=bundle.asr_rows, destruction=bundle.destruction_rows, rfd=bundle.rfd_rows,
                traces=bundle.traces, sweep=bundle.sweep_rows)
    report.write_atomic(path, (json.dumps(data, indent=1, sort_keys=True) + "\n").encode("utf-8"))
    manifest.record_artifact(path)


def _read_metrics(path) -> report.ReportBundle:
    data = json.loads(Path(path).read_text())
    return report.ReportBundle(data["asr"], data["destruction"], data["rfd"], data["traces"], data["sweep"])


def sweep_configs(cfg, base: attacks.AttackConfig):
    """(axis value, preset name, attack config) for every sweep point.

    The axis override is applied before the preset, so a preset's fixed
    settings (e.g. beta = 1 for ila) always win.
    """
    axis = cfg.sweep_axis
    if axis is None:
        raise PipelineError("sweep needs sweep.axis and sweep.values")
    if not cfg.sweep_values:
        raise PipelineError("sweep.values is empty")
    for raw in cfg.sweep_values:
        presets = cfg.presets
        if axis == "layer":
            value, over = raw, replace(base, tap=raw)
        elif axis == "T":
            value = int(raw)
            over = replace(base, T=value, t1=min(base.t1, value))
        elif axis == "preset":
            value, over, presets = raw, base, [raw]
        else:
            value = float(raw)
            over = replace(base, **{axis: value})
        for name in presets:
            yield value, name, attacks.preset(name, over)


def stage_sweep(cfg, manifest) -> dict:
    test = _test_set(cfg, manifest)
    x, y = test.images, test.labels
    src = source_name(cfg)
    graph = _load_model(cfg, src, manifest)
    targets = {name: _load_model(cfg, name, manifest) for name in target_names(cfg)}
    benign = {name: zoo.predict(g, x) for name, g in targets.items()}
    base = replace(cfg.attack, seed=attack_seed(cfg, manifest))
    bundle = report.ReportBundle()
    for value, name, acfg in sweep_configs(cfg, base):
        log.info("sweep %s=%s preset %s", cfg.sweep_axis, value, name)
        x_adv, _ = attacks.run_attack(graph, x, y, acfg, chunk_size=cfg.chunk_size)
        rows = _asr_rows(src, targets, acfg, x, y, x_adv, benign, cfg.subtract_benign)
        bundle.asr_rows += rows
        bundle.sweep_rows += [dict(axis=cfg.sweep_axis, value=value, **r) for r in rows]
    sweep_dir = Path(cfg.out_dir) / "sweep"
    for p in report.emit_report(bundle, sweep_dir):
        manifest.record_artifact(p)
    _write_metrics(sweep_dir / "metrics.json", bundle, manifest)
    return dict(axis=cfg.sweep_axis, values=list(cfg.sweep_values), points=len(bundle.sweep_rows))


def stage_report(cfg, manifest) -> dict:
    out = Path(cfg.out_dir)
    eval_metrics, sweep_metrics = out / "eval" / "metrics.json", out / "sweep" / "metrics.json"
    if not eval_metrics.exists() and not sweep_metrics.exists():
        raise MissingArtifactError(eval_metrics, "eval")
    bundle = report.ReportBundle()
    for path in (eval_metrics, sweep_metrics):
        if path.exists():
            digest = manifest.artifact_digest(path)
            if digest is not None and digest != sha256_file(path):
                raise PipelineError(f"{path}: checksum does not match the manifest")
            part = _read_metrics(path)
            bundle.asr_rows += part.asr_rows
            bundle.destruction_rows += part.destruction_rows
            bundle.rfd_rows += part.rfd_rows
            bundle.traces.update(part.traces)
            bundle.sweep_rows += part.sweep_rows
    written = report.emit_report(bundle, out / "report", emit_plots=cfg.emit_plots)
    for p in written:
        manifest.record_artifact(p)
    return dict(files=[p.relative_to(out).as_posix() for p in written])


STAGES = dict(train=stage_train, attack=stage_attack, eval=stage_eval, sweep=stage_sweep, report=stage_report)


def run_experiment(cfg: ExperimentConfig, subcommand: str) -> Path:
    """Run one stage; returns the manifest path."""
    if subcommand not in STAGES:
        raise PipelineError(f"unknown subcommand {subcommand!r}; expected one of {SUBCOMMANDS}")
    cfg = replace(cfg, out_dir=Path(cfg.out_dir).resolve())
    out = cfg.out_dir
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise report.ReportError(f"cannot create output directory {out}: {exc.strerror}") from None
    manifest = Manifest(out, cfg)
    summary = STAGES[subcommand](cfg, manifest)
    manifest.data["stages"][subcommand] = summary
    manifest.save()
    return manifest.path

"""Stage-cached experiment runner.

An artifact directory holds one subdirectory per stage plus ``manifest.json``.
A stage is skipped when its cache key (hash of its config slice, the seed and
its upstream stages' output digests) matches the manifest and its outputs
still hash to the recorded values. One writer at a time holds ``.lock``.
"""
from __future__ import annotations

import hashlib
import json
import os
import zlib
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock, Timeout

from .adversarial import AttackConfig, Classifier, TrainConfig, accuracy, classify, pgd_attack, train
from .checkpoint import load_checkpoint, load_state_dict, save_module
from .config import ExperimentConfig
from .denoiser import Denoiser, DenoiserPredictor, DSMConfig, train_denoiser_dsm
from .errors import CEDiffError, StageError
from .idx import load_idx
from .mixture import GaussianMixture, MixturePredictor, mixture_bayes_posterior
from .pipeline import (QUANTILES, CEDataset, DiffusionGenerator, RobustModelGenerator, build_ce_dataset,
                       ce_accuracy_report, ce_distance_classifier, confidence_distance_correlation,
                       distance_summary, source_prediction_probability)
from .reports import emit_reports, read_table, write_csv
from .sampler import SamplerConfig
from .schedule import Schedule
from .toy import mixture_from_config

THREADS_ENV = "CEDIFF_THREADS"
MANIFEST = "manifest.json"
_GEN_KEYS = ["schedule", "neighborhood", "guidance", "boltzmann_sigma_t_scaling", "sampler", "ce.l0_threshold"]


def stage_seed(seed: int, name: str) -> int:
    """Independent 32-bit seed for a named stage, derived from the config seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _eps_name(eps: float) -> str:
    return f"eps_{eps!r}"


class Run:
    """Lazy access to one artifact directory's inputs and intermediate results."""

    def __init__(self, cfg: ExperimentConfig, out: Path, log=None):
        self.cfg = cfg
        self.out = out
        self.log = log or (lambda msg: None)
        self.digest = cfg.digest
        self.seed = int(cfg["io.seed"])
        s = cfg["schedule"]
        self.sched = Schedule(s["beta_min"], s["beta_max"], s["t_min"], 1.0, s["n_steps"])
        self._cache = {}

    def path(self, rel: str) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def csv(self, rel, header, rows):
        write_csv(self.path(rel), self.digest, header, rows)
        return rel

    def mixture(self) -> GaussianMixture | None:
        block = self.cfg["score_model.mixture"]
        return None if block is None else mixture_from_config(block)

    def data(self):
        if "data" not in self._cache:
            with np.load(self.out / "data" / "data.npz") as z:
                self._cache["data"] = {k: z[k] for k in z.files}
        return self._cache["data"]

    @property
    def n_classes(self) -> int:
        return int(self.data()["n_classes"])

    def predictor(self):
        if self.cfg["score_model.source"] == "analytic":
            return MixturePredictor(self.mixture(), self.sched)
        header, tensors = load_checkpoint(self.out / "score" / "denoiser.ckpt", kind="denoiser")
        model = Denoiser(**header["arch"])
        model.load_state_dict(load_state_dict(tensors))
        model.eval()
        return DenoiserPredictor(model, self.sched)

    def sampler(self) -> SamplerConfig:
        sp = self.cfg["sampler"]
        seed = sp["seed"] if sp["seed"] is not None else stage_seed(self.seed, "sampler")
        return SamplerConfig(n_steps=sp["n_steps"] or self.cfg["schedule.n_steps"], t_min=self.sched.t_min,
                             seed=seed, clip_range=None if sp["clip"] is None else tuple(sp["clip"]),
                             chunk_size=sp["chunk_size"])

    def generator(self, variant=None) -> DiffusionGenerator:
        return DiffusionGenerator(self.sched, self.sampler(), self.predictor(),
                                  variant or self.cfg["neighborhood.variant"], self.cfg["guidance.w"],
                                  self.cfg["neighborhood.sigma_ce"], self.cfg["boltzmann_sigma_t_scaling"])

    def classifier(self, eps: float) -> Classifier:
        key = ("clf", eps)
        if key not in self._cache:
            header, tensors = load_checkpoint(self.out / "classifiers" / f"{_eps_name(eps)}.ckpt", kind="classifier")
            model = Classifier(**header["arch"])
            model.load_state_dict(load_state_dict(tensors))
            model.eval()
            self._cache[key] = model
        return self._cache[key]

    def dataset(self, name: str) -> CEDataset:
        key = ("ce", name)
        if key not in self._cache:
            self._cache[key] = CEDataset.load(self.out / "ce" / f"{name}.jsonl")
        return self._cache[key]

    @property
    def epsilons(self):
        return list(self.cfg["classifier.epsilons"])

    def provenance(self, **extra) -> dict:
        return {"config_digest": self.digest, "seed": self.seed, **extra}


# stages ---------------------------------------------------------------------

def _data(run: Run):
    c = run.cfg["data"]
    if c["source"] == "mixture":
        gm = run.mixture()
        rng = np.random.default_rng(stage_seed(run.seed, "data"))
        x, y = gm.sample(c["n_train"], rng)
        xte, yte = gm.sample(c["n_test"], rng)
        n_classes = gm.n_classes
    else:
        p = c["idx"]
        tr = load_idx(p["train_images"], p["train_labels"])
        te = load_idx(p["test_images"], p["test_labels"])
        x, y = tr.flat()[: p["max_train"]], tr.labels[: p["max_train"]]
        xte, yte = te.flat()[: p["max_test"]], te.labels[: p["max_test"]]
        n_classes = int(max(y.max(), yte.max())) + 1
    np.savez(run.path("data/data.npz"), x_train=x, y_train=y, x_test=xte, y_test=yte, n_classes=n_classes)
    run._cache.pop("data", None)
    return ["data/data.npz"]


def _score(run: Run):
    if run.cfg["score_model.source"] == "analytic":
        run.path("score/mixture.json").write_text(json.dumps(run.mixture().to_dict(), sort_keys=True))
        return ["score/mixture.json"]
    d = run.data()
    c = dict(run.cfg["score_model.denoiser"])
    seed = stage_seed(run.seed, "score")
    torch.manual_seed(seed)
    model = Denoiser(d["x_train"].shape[1], run.n_classes, c.pop("hidden"), c.pop("depth"), c.pop("time_dim"))
    model, losses = train_denoiser_dsm(model, run.sched, d["x_train"], d["y_train"], DSMConfig(seed=seed, **c))
    save_module(run.path("score/denoiser.ckpt"), "denoiser", model, model.arch(),
                extra={"config_digest": run.digest})
    run.csv("score/dsm_loss.csv", ["epoch", "loss"], enumerate(losses))
    return ["score/denoiser.ckpt", "score/dsm_loss.csv"]


def _classifiers(run: Run):
    d = run.data()
    c = run.cfg["classifier"]
    outputs, rows = [], []
    for k, eps in enumerate(run.epsilons):
        seed = stage_seed(run.seed, f"classifier/{k}")
        torch.manual_seed(seed)
        model = Classifier(d["x_train"].shape[1], run.n_classes, c["hidden"], c["depth"],
                           c["dropout"] if eps == 0 else c["robust_dropout"])
        cfg = TrainConfig(c["epochs"], c["batch_size"], c["lr"], c["pgd_steps"], c["epsilon_ramp_epochs"], seed)
        model, hist = train(model, d["x_train"], d["y_train"], eps, cfg)
        rel = f"classifiers/{_eps_name(eps)}.ckpt"
        save_module(run.path(rel), "classifier", model, model.arch(),
                    extra={"epsilon": eps, "config_digest": run.digest})
        outputs.append(rel)
        rows += [(eps, i, hist.clean_acc[i], hist.adv_acc[i], hist.loss[i]) for i in range(len(hist.loss))]
    outputs.append(run.csv("classifiers/history.csv", ["epsilon", "epoch", "clean_acc", "adv_acc", "loss"], rows))
    return outputs


def _ce_variants(run: Run):
    primary = run.cfg["neighborhood.variant"]
    other = run.cfg["ce.compare_variant"]
    return [primary] + ([other] if other else [])


def _ce(run: Run):
    d = run.data()
    n = min(run.cfg["ce.n_samples"], len(d["x_train"]))
    outputs = []
    for variant in _ce_variants(run):
        gen = run.generator(variant)
        ds = build_ce_dataset(gen, d["x_train"][:n], d["y_train"][:n], run.cfg["ce.n_per_class"],
                              provenance=run.provenance(sampler_seed=gen.sampler.seed, variant=variant))
        run.log(f"  {variant}: {len(ds)} records, {ds.n_failures} failures")
        ds.save(run.path(f"ce/{variant}.jsonl"))
        outputs.append(f"ce/{variant}.jsonl")
    return outputs


def _robust_ce(run: Run):
    d = run.data()
    c = run.cfg["ce.robust"]
    eps = max(run.epsilons)
    gen = RobustModelGenerator(run.classifier(eps), f"classifier {_eps_name(eps)}", c["step_size"],
                               c["conf_threshold"], c["max_steps"], c["clip"])
    n = min(c["n_samples"], len(d["x_train"]))
    ds = build_ce_dataset(gen, d["x_train"][:n], d["y_train"][:n], 1, provenance=run.provenance(model_epsilon=eps))
    ds.save(run.path("ce/robust.jsonl"))
    return ["ce/robust.jsonl"]


def _ce_from_ce(run: Run):
    c = run.cfg["ce.ce_from_ce"]
    base = run.dataset("robust")
    recs = [r for r in base.records if r.y_ce != r.y]
    if not recs:
        raise CEDiffError("no different-class robust counterfactuals to regenerate from")
    xs = np.stack([r.x_ce for r in recs])
    ys = np.array([r.y_ce for r in recs])
    gen = run.generator()
    ds = build_ce_dataset(gen, xs, ys, c["n_per_class"], source_ids=[r.record_id for r in recs],
                          provenance=run.provenance(sampler_seed=gen.sampler.seed, base="robust"))
    ds.save(run.path("ce/ce_from_ce.jsonl"))
    return ["ce/ce_from_ce.jsonl"]


def _ce_classify(run: Run):
    d = run.data()
    c = run.cfg["ce.classifier"]
    n = min(c["n_samples"], len(d["x_test"]))
    x, y = d["x_test"][:n], d["y_test"][:n]
    pred, mean = ce_distance_classifier(run.generator(), x, c["n_per_class"])
    gm = run.mixture() if run.cfg["data.source"] == "mixture" else None
    bayes = mixture_bayes_posterior(gm, x).argmax(1) if gm is not None else np.full(n, -1)
    header = ["sample_id", "y", "predicted", "bayes_predicted"] + [f"dist_{k}" for k in range(mean.shape[1])]
    rows = [[i, int(y[i]), int(pred[i]), int(bayes[i])] + [float(v) for v in mean[i]] for i in range(n)]
    return [run.csv("ce_classify/ce_classifier.csv", header, rows)]


def _hist_rows(values_by_series, bins, *prefix):
    both = np.concatenate([v for v in values_by_series.values()])
    edges = np.histogram_bin_edges(both, bins=bins)
    rows = []
    for name, vals in values_by_series.items():
        counts, _ = np.histogram(vals, bins=edges)
        rows += [(*prefix, name, float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(len(counts))]
    return rows


def _eval(run: Run):
    ev = run.cfg["evaluation"]
    d = run.data()
    out, summary = [], []
    gm = run.mixture() if run.cfg["data.source"] == "mixture" else None
    eps_list = run.epsilons
    models = {e: run.classifier(e) for e in eps_list}
    pgd = run.cfg["classifier.pgd_steps"]

    if ev["robustness"]:
        wide, long = [], []
        for e, m in models.items():
            acc = {}
            for split in ("train", "test"):
                x, y = d[f"x_{split}"], d[f"y_{split}"]
                for a in eps_list:
                    xt = torch.as_tensor(x, dtype=torch.get_default_dtype())
                    adv = pgd_attack(m, xt, torch.as_tensor(y), AttackConfig(a, pgd)) if a > 0 else xt
                    norm = float(torch.linalg.vector_norm((adv - xt).double(), dim=1).max())
                    acc[split, a] = float((classify(m, adv)[1].argmax(1) == y).mean())
                    long.append((e, a, split, acc[split, a], norm))
            wide.append((e, acc["train", 0.0] if 0.0 in eps_list else accuracy(m, d["x_train"], d["y_train"]),
                         acc["test", 0.0] if 0.0 in eps_list else accuracy(m, d["x_test"], d["y_test"]),
                         acc["train", e] if e > 0 else float("nan"), acc["test", e] if e > 0 else float("nan")))
        out.append(run.csv("eval/robustness_matrix.csv",
                           ["model_epsilon", "attack_epsilon", "split", "accuracy", "max_delta_norm"], long))
        out.append(run.csv("eval/robustness.csv",
                           ["epsilon", "clean_train_acc", "clean_test_acc", "pgd_train_acc", "pgd_test_acc"], wide))

    variants = _ce_variants(run)
    sets = {v: run.dataset(v) for v in variants}
    primary = sets[variants[0]]
    if ev["variant_comparison"] or ev["ce_quality"]:
        rows = [(v, r.record_id, r.source_id, r.y, r.y_ce, r.l2, r.l0) for v, ds in sets.items() for r in ds.records]
        out.append(run.csv("eval/fig2_records.csv", ["variant", "record_id", "source_id", "y", "y_ce", "l2", "l0"], rows))
        hist = []
        for metric in ("l2", "l0"):
            vals = {v: np.array([getattr(r, metric) for r in ds.records if r.y_ce != r.y]) for v, ds in sets.items()}
            hist += _hist_rows(vals, ev["bins"], metric)
        out.append(run.csv("eval/fig2_hist.csv", ["metric", "variant", "bin_lo", "bin_hi", "count"], hist))
        qrows = []
        std = models[min(eps_list)]
        for v, ds in sets.items():
            diff = [r for r in ds.records if r.y_ce != r.y]
            xc = np.stack([r.x_ce for r in diff])
            yc = np.array([r.y_ce for r in diff])
            bayes = float((mixture_bayes_posterior(gm, xc).argmax(1) == yc).mean()) if gm is not None else float("nan")
            l2 = np.array([r.l2 for r in diff])
            l0 = np.array([r.l0 for r in diff])
            qrows.append((v, len(diff), bayes, float((classify(std, xc)[1].argmax(1) == yc).mean()),
                          float(np.median(l2)), float(np.median(l0)), float(l2.mean()), float(l0.mean()),
                          ds.n_failures))
            summary += [(f"ce_quality.{v}.bayes_acc", qrows[-1][2]), (f"ce_quality.{v}.median_l2", qrows[-1][4]),
                        (f"ce_quality.{v}.median_l0", qrows[-1][5])]
        out.append(run.csv("eval/ce_quality.csv",
                           ["variant", "n_diff", "bayes_acc", "standard_model_acc", "median_l2", "median_l0",
                            "mean_l2", "mean_l0", "n_failures"], qrows))

    if ev["correlation"]:
        rows, r2rows = [], []
        for e, m in models.items():
            r2, t = confidence_distance_correlation(m, primary, run.cfg["ce.include_same_class"])
            r2rows.append((e, r2, len(t["source_id"])))
            summary.append((f"r2.eps_{e!r}", r2))
            rows += [(e, int(t["source_id"][i]), int(t["y"][i]), float(t["confidence"][i]),
                      float(t["avg_distance"][i]), int(t["predicted"][i])) for i in range(len(t["source_id"]))]
        out.append(run.csv("eval/fig3_scatter.csv",
                           ["epsilon", "source_id", "y", "confidence", "avg_distance", "predicted"], rows))
        out.append(run.csv("eval/fig3_r2.csv", ["epsilon", "r2", "n"], r2rows))

    if ev["ce_accuracy"] or ev["source_prediction"]:
        rows = []
        for e, m in models.items():
            rep = ce_accuracy_report(m, primary)
            p, counts = source_prediction_probability(m, primary) if ev["source_prediction"] else (float("nan"), {})
            rows.append((e, rep["clean_acc"], rep["same_class_acc"], rep["diff_class_acc"], p,
                         counts.get("n_qualifying", 0), counts.get("n_source_predicted", 0), rep["n_same"], rep["n_diff"]))
            summary += [(f"diff_class_acc.eps_{e!r}", rep["diff_class_acc"]), (f"source_prediction.eps_{e!r}", p)]
        out.append(run.csv("eval/fig4_accuracy.csv",
                           ["epsilon", "clean_acc", "same_class_acc", "diff_class_acc", "source_prediction_prob",
                            "n_qualifying", "n_source_predicted", "n_same", "n_diff"], rows))

    if ev["ce_from_ce"]:
        regen = run.dataset("ce_from_ce")
        vals = {"baseline": np.array([r.l2 for r in primary.records if r.y_ce != r.y]),
                "from_robust_ce": np.array([r.l2 for r in regen.records if r.y_ce != r.y])}
        rows = _hist_rows(vals, run.cfg["ce.ce_from_ce.bins"])
        out.append(run.csv("eval/fig5_hist.csv", ["series", "bin_lo", "bin_hi", "count"], rows))
        edges = np.histogram_bin_edges(np.concatenate(list(vals.values())), bins=run.cfg["ce.ce_from_ce.bins"])
        srows = []
        for name, v in vals.items():
            s = distance_summary(v, edges)
            srows.append((name, s["n"], s["mean"], *[s["quantiles"][q] for q in QUANTILES]))
            summary.append((f"ce_from_ce.{name}.median_l2", s["quantiles"][0.5]))
        out.append(run.csv("eval/fig5_summary.csv", ["series", "n", "mean"] + [f"q{q:g}" for q in QUANTILES], srows))

    if ev["ce_classifier"]:
        _, t = read_table(run.out / "ce_classify" / "ce_classifier.csv")
        y = np.array(t["y"], dtype=int)
        acc = float((np.array(t["predicted"], dtype=int) == y).mean())
        summary.append(("ce_classifier.accuracy", acc))
        if gm is not None:
            summary.append(("ce_classifier.bayes_accuracy", float((np.array(t["bayes_predicted"], dtype=int) == y).mean())))

    out.append(run.csv("eval/summary.csv", ["key", "value"], summary))
    return out


def _report_inputs(cfg: ExperimentConfig):
    ev = cfg["evaluation"]
    need = []
    if ev["variant_comparison"] or ev["ce_quality"]:
        need.append("fig2_hist.csv")
    if ev["correlation"]:
        need.append("fig3_scatter.csv")
    if ev["ce_accuracy"] or ev["source_prediction"]:
        need.append("fig4_accuracy.csv")
    if ev["robustness"]:
        need.append("robustness.csv")
    if ev["ce_from_ce"]:
        need.append("fig5_hist.csv")
    return need


def _report(run: Run):
    paths = emit_reports(run.out, _report_inputs(run.cfg))
    return [str(p.relative_to(run.out)) for p in paths]


def _eval_deps(cfg):
    ev = cfg["evaluation"]
    deps = ["data", "score", "classifiers", "ce"]
    if ev["ce_from_ce"]:
        deps += ["robust_ce", "ce_from_ce"]
    if ev["ce_classifier"]:
        deps.append("ce_classify")
    return deps


# name -> (config slice, upstream stages, implementation)
STAGES = {
    "data": (lambda c: ["data", "score_model.mixture"], lambda c: [], _data),
    "score": (lambda c: ["schedule", "score_model"], lambda c: ["data"], _score),
    "classifiers": (lambda c: ["classifier"], lambda c: ["data"], _classifiers),
    "ce": (lambda c: _GEN_KEYS + ["ce.n_samples", "ce.n_per_class", "ce.compare_variant"],
           lambda c: ["data", "score"], _ce),
    "robust_ce": (lambda c: ["ce.robust", "ce.l0_threshold"], lambda c: ["data", "classifiers"], _robust_ce),
    "ce_from_ce": (lambda c: _GEN_KEYS + ["ce.ce_from_ce"], lambda c: ["score", "robust_ce"], _ce_from_ce),
    "ce_classify": (lambda c: _GEN_KEYS + ["ce.classifier"], lambda c: ["data", "score"], _ce_classify),
    "eval": (lambda c: ["evaluation", "ce", "classifier.pgd_steps"], _eval_deps, _eval),
    "report": (lambda c: ["evaluation"], lambda c: ["eval"], _report),
}

TARGETS = {
    "train-score": ["score"],
    "train-classifier": ["classifiers"],
    "gen-ce": ["ce"],
    "ce-classify": ["ce_classify"],
    "eval": ["eval"],
    "report": ["report"],
    "run": ["report"],
}


def _plan(cfg, targets):
    order = []

    def visit(name):
        if name in order:
            return
        for dep in STAGES[name][1](cfg):
            visit(dep)
        order.append(name)

    for t in targets:
        visit(t)
    return order


def _read_manifest(out: Path):
    p = out / MANIFEST
    return json.loads(p.read_text()) if p.is_file() else None


def _write_manifest(out: Path, manifest: dict):
    tmp = out / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, sort_keys=True, indent=1))
    os.replace(tmp, out / MANIFEST)


def _cached(out: Path, entry, key) -> bool:
    if not entry or entry.get("key") != key or entry.get("status") != "done":
        return False
    return all((out / rel).is_file() and _sha(out / rel) == h for rel, h in entry["outputs"].items())


def _configure_torch():
    torch.set_num_threads(int(os.environ.get(THREADS_ENV, "1")))
    torch.use_deterministic_algorithms(True)


def run_experiment(cfg: ExperimentConfig, out, targets=("report",), resume: bool = True, log=None) -> Path:
    """Execute the stages needed for ``targets`` in ``out``; returns the artifact directory.

    Stages already completed with the same cache key are skipped when
    ``resume`` is true. An existing directory created from a different
    config is refused.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    log = log or (lambda msg: None)
    try:
        lock = FileLock(str(out / ".lock"), timeout=0)
        lock.acquire()
    except Timeout:
        raise CEDiffError(f"{out} is locked by another run") from None
    try:
        _configure_torch()
        manifest = _read_manifest(out)
        if manifest is not None and manifest.get("config_digest") != cfg.digest:
            raise CEDiffError(f"{out} holds artifacts of config {manifest.get('config_digest')}, "
                              f"not {cfg.digest}; use a fresh output directory")
        manifest = manifest or {"config_digest": cfg.digest, "stages": {}}
        resolved = out / "config.resolved.yaml"
        if not resolved.is_file() or resolved.read_text() != cfg.to_yaml():
            resolved.write_text(cfg.to_yaml())
        run = Run(cfg, out, log)
        for name in _plan(cfg, targets):
            keys_fn, deps_fn, impl = STAGES[name]
            upstream = {d: manifest["stages"][d]["digest"] for d in deps_fn(cfg)}
            key = hashlib.sha256(json.dumps(
                {"stage": name, "seed": run.seed, "slice": {k: cfg[k] for k in keys_fn(cfg)}, "upstream": upstream},
                sort_keys=True).encode()).hexdigest()
            entry = manifest["stages"].get(name)
            if resume and _cached(out, entry, key):
                log(f"[{name}] cached")
                continue
            log(f"[{name}] running")
            try:
                outputs = impl(run)
            except Exception as exc:
                manifest["stages"][name] = {"key": key, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}
                _write_manifest(out, manifest)
                raise StageError(name, exc) from exc
            hashes = {rel: _sha(out / rel) for rel in outputs}
            digest = hashlib.sha256(json.dumps([key, hashes], sort_keys=True).encode()).hexdigest()
            manifest["stages"][name] = {"key": key, "status": "done", "outputs": hashes, "digest": digest}
            _write_manifest(out, manifest)
        return out
    finally:
        lock.release()

"""Command implementations: gen-data, train, attack, calibrate, detect, explain, eval.

Each command writes its reports into an output directory together with the
resolved configuration (``run.cfg``) and the tool version (``VERSION``).
All reports are CSV, all images 16-bit PGM, and every random stream is
derived from ``RunConfig.seed`` with :func:`sarbnn.config.derive_seed`:

=====================  ==============================================
label                  stream
=====================  ==============================================
``data/train``         synthetic training chips
``data/test``          synthetic test chips
``augment/train``      random training patches
``init``               posterior initialisation
``train``              minibatch order and reparameterisation noise
``split/test``         benign / attack-source split of the test chips
``attack/n<N>/<id>``   attack on chip ``id`` with N scatterers
``calibrate``          50 + 50 calibration sample
``mc``                 weight draws for prediction and saliency
``mc/repeat<r>``       repeated draws for the MI standard error
=====================  ==============================================
"""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import mannwhitneyu

from . import __version__
from . import attack as atk
from . import bnn, calibration, checkpoint, data, saliency, uncertainty
from .config import RunConfig, derive_seed

logger = logging.getLogger(__name__)

TOOL_VERSION = f"v{__version__}"


class UsageError(ValueError):
    pass


class ManifestMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# helpers


def prepare_out(out, cfg: RunConfig, command: str) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    data._atomic_write(out / "run.cfg", cfg.render())
    data._atomic_write(out / "VERSION", f"sarbnn {TOOL_VERSION}\ncommand {command}\n")
    return out


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    data._atomic_write(Path(path), buf.getvalue())


def architecture(cfg: RunConfig) -> bnn.ArchitectureSpec:
    size = (1, cfg.crop_size, cfg.crop_size)
    if cfg.arch.lower() in {k.lower() for k in bnn.PRESETS}:
        return bnn.preset(cfg.arch, size, cfg.num_classes)
    return bnn.ArchitectureSpec.parse(cfg.arch, size, cfg.num_classes).validate()


def load_model(cfg: RunConfig, path) -> bnn.BayesianModel:
    if not path:
        raise UsageError("no checkpoint given (--checkpoint or the 'checkpoint' config key)")
    return checkpoint.load(path, bnn.PriorSpec(cfg.prior_mean, cfg.prior_std))


def model_inputs(ds: data.ChipDataset, model: bnn.BayesianModel, source="images") -> np.ndarray:
    """Chips as model inputs; larger chips are centre-cropped."""
    c, h, w = model.arch.input_size
    ch, cw = ds.chip_shape
    if ds.images.shape[1] != c or ch < h or cw < w:
        raise ManifestMismatch(f"{source}: chips are {ds.images.shape[1]}x{ch}x{cw}, "
                               f"the model expects {c}x{h}x{w}")
    return np.ascontiguousarray(data.center_crop(ds.images, (h, w)))


def _mc_seed(cfg: RunConfig) -> int:
    return derive_seed(cfg.seed, "mc")


def _predict(model, x, cfg: RunConfig, seed: int | None = None) -> uncertainty.BatchPrediction:
    return uncertainty.predict_batch(model, x, cfg.samples, _mc_seed(cfg) if seed is None else seed)


def _data_manifest(data_dir, name: str) -> Path:
    if not data_dir:
        raise UsageError("no dataset directory given (--data or the 'data_dir' config key)")
    d = Path(data_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {d}")
    return d / name


def _calibration_sample(cfg: RunConfig, n_benign: int, n_adv: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(derive_seed(cfg.seed, "calibrate"))
    b = np.sort(rng.choice(n_benign, size=min(cfg.calibration_per_group, n_benign), replace=False))
    a = np.sort(rng.choice(n_adv, size=min(cfg.calibration_per_group, n_adv), replace=False))
    return b, a


def _policy_row(p: calibration.DetectionPolicy) -> list:
    return [p.threshold, "" if p.alpha is None else p.alpha, "" if p.tpr is None else p.tpr,
            "" if p.fpr is None else p.fpr, int(p.infeasible)]


# ---------------------------------------------------------------------------
# gen-data


def gen_data(cfg: RunConfig, out) -> dict:
    out = prepare_out(out, cfg, "gen-data")
    counts = {}
    for split, per_class in (("train", cfg.train_per_class), ("test", cfg.test_per_class)):
        ds = data.generate_synthetic(cfg.num_classes, per_class, cfg.chip_size,
                                     derive_seed(cfg.seed, f"data/{split}"), split)
        data.save_manifest(ds, out / f"{split}.csv")
        counts[split] = len(ds)
    return counts


# ---------------------------------------------------------------------------
# train


def train(cfg: RunConfig, data_dir, out) -> tuple[bnn.BayesianModel, list[dict]]:
    tr = data.load_manifest(_data_manifest(data_dir, "train.csv"), cfg.num_classes, split="train")
    te = data.load_manifest(_data_manifest(data_dir, "test.csv"), cfg.num_classes, split="test")
    out = prepare_out(out, cfg, "train")
    size = (cfg.crop_size, cfg.crop_size)
    spec = data.PreprocessSpec(size, size, cfg.augment_count)
    tr = data.augment_and_crop(tr, spec, derive_seed(cfg.seed, "augment/train"))
    te = data.augment_and_crop(te, spec)
    model = bnn.build_model(architecture(cfg), bnn.PriorSpec(cfg.prior_mean, cfg.prior_std),
                            derive_seed(cfg.seed, "init"), rho_init=cfg.rho_init)
    tcfg = bnn.TrainingConfig(
        epochs=cfg.epochs, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
        kl_weight_schedule=cfg.kl_weight_schedule, mc_samples_per_step=cfg.mc_samples_per_step,
        rng_seed=derive_seed(cfg.seed, "train"), optimizer=cfg.optimizer, momentum=cfg.momentum,
        lr_schedule=cfg.lr_schedule)
    rows = []

    def on_epoch(_, row):
        # posterior-mean weights: cheap and deterministic
        logits = bnn.predict_logits(model, te.images, model.mean_weights())
        row["clean_accuracy"] = float(np.mean(logits.argmax(axis=1) == te.labels))
        rows.append(row)
        logger.info("epoch %d clean_accuracy=%.4f", row["epoch"], row["clean_accuracy"])

    history = bnn.Trainer(model, tcfg).fit(tr.images, tr.labels, on_epoch)
    checkpoint.save(model, out / "model.ckpt")
    write_csv(out / "train_log.csv", ["epoch", "nll", "kl", "total", "clean_accuracy"],
              [[r["epoch"], r["nll"], r["kl"], r["total"], r["clean_accuracy"]] for r in rows])
    return model, history


# ---------------------------------------------------------------------------
# attack


def run_attacks(cfg: RunConfig, ckpt, data_dir, out, attack_ns) -> dict[int, float]:
    """Split the test chips into a benign pool and attack sources; attack every source.

    Sources are the first ``attack_images`` chips of the second half that the
    posterior-mean model classifies correctly.  Only successful attacks enter
    ``adv_n<N>.csv``; every attempt is listed in ``attack_n<N>.csv``.
    """
    model = load_model(cfg, ckpt)
    te = data.load_manifest(_data_manifest(data_dir, "test.csv"), cfg.num_classes, split="test")
    x = model_inputs(te, model, "test.csv")
    out = prepare_out(out, cfg, "attack")
    perm = np.random.default_rng(derive_seed(cfg.seed, "split/test")).permutation(len(te))
    half = len(te) // 2
    benign_idx = np.sort(perm[:half])
    data.save_manifest(data.ChipDataset(x[benign_idx], te.labels[benign_idx],
                                        [te.ids[i] for i in benign_idx], "benign",
                                        te.provenance, te.num_classes), out / "benign.csv")
    pool = perm[half:]
    pred = bnn.predict_logits(model, x[pool], model.mean_weights()).argmax(axis=1)
    sources = pool[pred == te.labels[pool]][:cfg.attack_images]
    rates = {}
    summary = []
    for n in attack_ns:
        images, labels, ids, scat, report = [], [], [], {}, []
        for i in sources:
            cid = te.ids[i]
            acfg = atk.AttackConfig(
                n_scatterers=n, candidate_grid_stride=cfg.attack_stride,
                amplitude_range=(cfg.attack_amplitude_min, cfg.attack_amplitude_max),
                n_amplitudes=cfg.attack_amplitudes, radius=cfg.attack_radius,
                max_evals=cfg.attack_max_evals, rng_seed=derive_seed(cfg.seed, f"attack/n{n}/{cid}"),
                mask_percentile=cfg.attack_mask_percentile, mask_dilation=cfg.attack_mask_dilation,
                objective_samples=cfg.attack_objective_samples)
            rec = atk.attack(model, x[i], int(te.labels[i]), acfg)
            report.append([cid, n, int(rec.success), rec.true_label, rec.pred_before, rec.pred_after,
                           rec.evals, len(rec.specs)])
            if rec.success:
                aid = f"{cid}_n{n}"
                images.append(data.quantize(rec.perturbed))
                labels.append(rec.true_label)
                ids.append(aid)
                scat[aid] = [s.as_row() for s in rec.specs]
        shape = (0,) + x.shape[1:]
        adv = data.ChipDataset(np.stack(images) if images else np.zeros(shape, np.float32),
                               np.asarray(labels, dtype=np.int64), ids, "adversarial",
                               f"attack(n={n})", te.num_classes, scat)
        data.save_manifest(adv, out / f"adv_n{n}.csv")
        write_csv(out / f"attack_n{n}.csv", ["id", "attack_n", "success", "true_label", "pred_before",
                                              "pred_after", "evals", "scatterers"], report)
        rates[n] = len(ids) / len(sources) if len(sources) else 0.0
        summary.append([n, len(sources), len(ids), rates[n]])
        logger.info("attack n=%d: %d/%d successful", n, len(ids), len(sources))
    write_csv(out / "attack_summary.csv", ["attack_n", "attempted", "succeeded", "success_rate"], summary)
    return rates


# ---------------------------------------------------------------------------
# calibrate / detect


def write_validation_manifest(benign: data.ChipDataset, adversarial: data.ChipDataset, path) -> None:
    """One manifest holding both groups; the split column is benign or adversarial."""
    path = Path(path)
    img_dir = f"{path.stem}_images"
    (path.parent / img_dir).mkdir(parents=True, exist_ok=True)
    lines = [",".join(data.MANIFEST_COLUMNS)]
    for ds, split in ((benign, "benign"), (adversarial, "adversarial")):
        for img, label, cid in ds:
            rel = f"{img_dir}/{split}_{cid}.pgm"
            data.write_pgm(path.parent / rel, img[0])
            lines.append(f"{cid},{rel},{label},{split}")
    data._atomic_write(path, "\n".join(lines) + "\n")


def load_validation(path, num_classes: int) -> tuple[data.ChipDataset, data.ChipDataset]:
    return (data.load_manifest(path, num_classes, split="benign"),
            data.load_manifest(path, num_classes, split="adversarial"))


def calibrate(cfg: RunConfig, ckpt, benign_path, adversarial_path, out) -> calibration.DetectionPolicy:
    model = load_model(cfg, ckpt)
    ben = data.load_manifest(benign_path, cfg.num_classes)
    adv = data.load_manifest(adversarial_path, cfg.num_classes)
    out = prepare_out(out, cfg, "calibrate")
    bi, ai = _calibration_sample(cfg, len(ben), len(adv))
    ben, adv = ben.subset(bi), adv.subset(ai)
    u_b = _predict(model, model_inputs(ben, model, str(benign_path)), cfg).mi
    u_a = _predict(model, model_inputs(adv, model, str(adversarial_path)), cfg).mi
    policy = calibration.find_threshold(calibration.ValidationSet.from_groups(u_b, u_a), cfg.alpha)
    write_validation_manifest(ben, adv, out / "validation.csv")
    write_csv(out / "calibration.csv",
              ["threshold", "alpha", "tpr", "fpr", "infeasible", "n_benign", "n_adversarial", "samples"],
              [_policy_row(policy) + [len(ben), len(adv), cfg.samples]])
    return policy


def detect(cfg: RunConfig, ckpt, images_path, out, theta: float | None = None,
           validation=None) -> calibration.DetectionPolicy:
    if theta is None and validation is None:
        raise UsageError("detect needs --theta, or --alpha with a --validation manifest")
    model = load_model(cfg, ckpt)
    ds = data.load_manifest(images_path, cfg.num_classes)
    x = model_inputs(ds, model, str(images_path))
    if theta is not None:
        policy, source = calibration.DetectionPolicy(float(theta)), "given"
    else:
        ben, adv = load_validation(validation, cfg.num_classes)
        u_b = _predict(model, model_inputs(ben, model, str(validation)), cfg).mi
        u_a = _predict(model, model_inputs(adv, model, str(validation)), cfg).mi
        policy = calibration.find_threshold(calibration.ValidationSet.from_groups(u_b, u_a), cfg.alpha)
        source = "calibrated"
    out = prepare_out(out, cfg, "detect")
    pred = _predict(model, x, cfg)
    mi, probs = pred.mi, pred.mean_probs
    verdict = policy.decide(mi)
    rows = [[cid, int(pred.predicted[i])] + [float(p) for p in probs[i]]
            + [float(mi[i]), "adversarial" if verdict[i] else "benign"] for i, cid in enumerate(ds.ids)]
    write_csv(out / "verdicts.csv",
              ["id", "predicted"] + [f"p_{c}" for c in range(probs.shape[1])] + ["mi", "verdict"], rows)
    write_csv(out / "policy.csv", ["threshold", "alpha", "tpr", "fpr", "infeasible", "source"],
              [_policy_row(policy) + [source]])
    return policy


# ---------------------------------------------------------------------------
# explain


def _encode_topk(values: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Selected scores -> PGM levels 1..65535 (0 stays for unselected pixels)."""
    lo, hi = float(values.min()), float(values.max())
    if hi > lo:
        q = 1.0 + np.round((values - lo) / (hi - lo) * (data.MAXVAL - 1))
    else:
        q = np.full(values.shape, float(data.MAXVAL))
    return q / data.MAXVAL, lo, hi


def explain(cfg: RunConfig, ckpt, image_path, out, ks=None) -> list[saliency.SaliencyBundle]:
    model = load_model(cfg, ckpt)
    image_path = Path(image_path)
    if image_path.suffix.lower() == ".csv":
        ds = data.load_manifest(image_path, cfg.num_classes)
    else:
        if not image_path.exists():
            raise FileNotFoundError(f"image not found: {image_path}")
        img = data.read_pgm(image_path)
        ds = data.ChipDataset(img[None, None], np.zeros(1, np.int64), [image_path.stem], "explain",
                              str(image_path), cfg.num_classes)
    x = model_inputs(ds, model, str(image_path))
    out = prepare_out(out, cfg, "explain")
    npix = x.shape[-2] * x.shape[-1]
    ks = list(ks or cfg.k_values())
    for j, k in enumerate(ks):
        if k > npix:
            warnings.warn(f"k={k} exceeds the {npix} pixels of the image; keeping all", stacklevel=2)
            ks[j] = npix
    bundles = saliency.gbp_bnn_batch(model, x, cfg.samples, _mc_seed(cfg), max(ks),
                                     resample=cfg.resample_saliency)
    scale_rows, topk_rows = [], []
    h, w = x.shape[-2:]
    for cid, b in zip(ds.ids, bundles):
        norm = b.normalized
        lo, hi = float(norm.min()), float(norm.max())
        data.write_pgm(out / f"{cid}_normalized.pgm", (norm - lo) / (hi - lo) if hi > lo else np.zeros_like(norm))
        scale_rows.append([cid, "normalized", lo, hi])
        for k in ks:
            idx = saliency.top_k_indices(norm, k)
            vals = norm.ravel()[idx]
            levels, klo, khi = _encode_topk(vals)
            m = np.zeros(h * w)
            m[idx] = levels
            data.write_pgm(out / f"{cid}_k{k}.pgm", m.reshape(h, w))
            scale_rows.append([cid, f"top{k}", klo, khi])
            for rank, (flat, v) in enumerate(zip(idx, vals)):
                topk_rows.append([cid, k, rank, int(flat // w), int(flat % w), float(v)])
    write_csv(out / "saliency_scale.csv", ["id", "map", "min", "max"], scale_rows)
    write_csv(out / "topk.csv", ["id", "k", "rank", "row", "col", "score"], topk_rows)
    return bundles


# ---------------------------------------------------------------------------
# eval


@dataclass
class EvalResult:
    auc: dict[int, float]
    success_p: dict[int, float]
    sir: dict[int, dict[int, float]]
    mi_benign: np.ndarray
    mi_adversarial: dict[int, np.ndarray]


def _seed_sd(model, x, cfg: RunConfig) -> float:
    """Mean over images of the std of MI across repeated weight-draw seeds."""
    if cfg.stderr_repeats < 2 or len(x) == 0:
        return float("nan")
    x = x[:cfg.stderr_images]
    mis = np.stack([_predict(model, x, cfg, derive_seed(cfg.seed, f"mc/repeat{r}")).mi
                    for r in range(cfg.stderr_repeats)])
    return float(np.mean(np.std(mis, axis=0, ddof=1)))


def evaluate(cfg: RunConfig, ckpt, attack_dir, out, attack_ns=None, ks=None) -> EvalResult:
    model = load_model(cfg, ckpt)
    attack_dir = Path(attack_dir)
    attack_ns = list(attack_ns or cfg.attack_values())
    ks = sorted(ks or cfg.k_values())
    ben = data.load_manifest(attack_dir / "benign.csv", cfg.num_classes)
    advs = {n: data.load_manifest(attack_dir / f"adv_n{n}.csv", cfg.num_classes) for n in attack_ns}
    for n, adv in advs.items():
        missing = [i for i in adv.ids if not adv.scatterers or i not in adv.scatterers]
        if missing:
            raise ManifestMismatch(f"adv_n{n}.csv: no scatterer ground truth for id {missing[0]!r}")
    out = prepare_out(out, cfg, "eval")
    xb = model_inputs(ben, model, "benign.csv")
    mi_b = _predict(model, xb, cfg).mi
    sd_b = _seed_sd(model, xb, cfg)
    det_rows, sir_rows = [], []
    res = EvalResult({}, {}, {}, mi_b, {})
    for n in attack_ns:
        adv = advs[n]
        xa = model_inputs(adv, model, f"adv_n{n}.csv")
        pred_a = _predict(model, xa, cfg)
        mi_a = pred_a.mi
        vset = calibration.ValidationSet.from_groups(mi_b, mi_a)
        curve = calibration.roc_auc(vset)
        calibration.write_roc_csv(curve, out / f"roc_n{n}.csv")
        p = float(mannwhitneyu(mi_a, mi_b, alternative="two-sided").pvalue)
        bi, ai = _calibration_sample(cfg, len(mi_b), len(mi_a))
        policy = calibration.find_threshold(calibration.ValidationSet.from_groups(mi_b[bi], mi_a[ai]),
                                            cfg.alpha)
        tpr, fpr = calibration.tpr_fpr(vset, policy.threshold)
        det_rows.append([n, len(mi_b), len(mi_a), curve.auc, float(mi_b.mean()), float(mi_a.mean()), p,
                         policy.threshold, cfg.alpha, tpr, fpr, sd_b, _seed_sd(model, xa, cfg)])
        res.auc[n], res.success_p[n], res.mi_adversarial[n] = curve.auc, p, mi_a

        m = min(cfg.sir_images, len(adv))
        sub = adv.subset(np.arange(m))
        sub_pred = uncertainty.BatchPrediction(pred_a.sample_probs[:m], pred_a.seed)
        bundles = saliency.gbp_bnn_batch(model, xa[:m], cfg.samples, _mc_seed(cfg), ks[-1],
                                         prediction=sub_pred, resample=cfg.resample_saliency)
        res.sir[n] = {}
        for k in ks:
            scores = [saliency.sir(saliency.top_k(b.normalized, k),
                                   saliency.ScattererGroundTruth(tuple((r, c) for r, c, _, _ in sub.scatterers[cid]),
                                                                 cfg.sir_radius))
                      for cid, b in zip(sub.ids, bundles)]
            res.sir[n][k] = float(np.mean(scores)) if scores else float("nan")
        sir_rows.append([cfg.arch, n, m] + [res.sir[n][k] for k in ks])
        logger.info("eval n=%d auc=%.4f p=%.3g sir=%s", n, curve.auc, p, res.sir[n])
    write_csv(out / "detection.csv",
              ["attack_n", "n_benign", "n_adversarial", "auc", "mi_benign_mean", "mi_adversarial_mean",
               "rank_test_p", "threshold", "alpha", "tpr", "fpr", "mi_seed_sd_benign",
               "mi_seed_sd_adversarial"], det_rows)
    write_csv(out / "sir.csv", ["arch", "attack_n", "images"] + [f"sir_{k}" for k in ks], sir_rows)
    return res

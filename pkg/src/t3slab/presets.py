"""Preset pipelines: each maps one experimental protocol onto the library and writes a bundle."""

from __future__ import annotations

import json
import logging
import shutil
from functools import cached_property
from pathlib import Path

import numpy as np

from . import data as D
from . import interventions as I
from . import trajectory as TJ
from .config import PRESETS, ConfigError, ExperimentConfig
from .model import ARModel, DenoiserModel, load_model, save_checkpoint
from .report import MANIFEST, JsonLinesHandler, ReportBundle
from .trainer import (CheckpointStore, EmptyObjectiveError, NumericalFailure, TrainConfig, dllm_train_run,
                      full_weighted_loss, train_run)

log = logging.getLogger("t3slab")


class InvariantViolation(AssertionError):
    pass


def require(cond: bool, message: str) -> None:
    if not cond:
        raise InvariantViolation(message)


def prepare_out_dir(out: Path, preset: str) -> None:
    """Refuse directories that hold anything other than a previous run of the same preset."""
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {out} is not a directory")
    if out.exists() and any(out.iterdir()):
        manifest = out / MANIFEST
        try:
            prev = json.loads(manifest.read_text(encoding="utf-8")).get("preset")
        except (OSError, ValueError):
            prev = _failed_run_preset(out)
        if prev != preset:
            raise ConfigError(f"output directory {out} is not empty and does not hold a previous {preset!r} bundle")
        shutil.rmtree(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from None


def _failed_run_preset(out: Path) -> str | None:
    # a run that stopped before writing its manifest still left config.txt behind
    try:
        return ExperimentConfig.load(out / "config.txt")["preset"]
    except ConfigError:
        return None


class PresetError(RuntimeError):
    """A module error raised inside a preset, with the preset named."""


class Lab:
    """Shared, lazily computed pieces of the protocols for one preset run."""

    def __init__(self, cfg: ExperimentConfig, bundle: ReportBundle):
        self.cfg = cfg
        self.bundle = bundle
        self.seed = cfg["seed"]

    # data ------------------------------------------------------------------

    @cached_property
    def train_set(self) -> D.Dataset:
        return self._checked(D.gen_dataset(self.cfg.data_config(), 3 * self.seed))

    @cached_property
    def heldout_set(self) -> D.Dataset:
        return self._checked(D.gen_dataset(self.cfg.data_config(self.cfg["data.heldout_examples"]), 3 * self.seed + 2))

    @cached_property
    def base_set(self) -> D.Dataset:
        return self._checked(D.gen_dataset(self.cfg.base_data_config(), 3 * self.seed + 1))

    def _checked(self, ds: D.Dataset) -> D.Dataset:
        bad = [i for i, ex in enumerate(ds) if not D.verify_answer(ex.target, ex)]
        require(not bad, f"generated examples fail self-verification: {bad[:5]}")
        longest = max(len(ex.prompt) + ex.T for ex in ds)
        if longest > self.cfg["arch.max_seq_len"]:
            raise ConfigError(f"examples of length {longest} exceed arch.max_seq_len")
        return ds

    # models ----------------------------------------------------------------

    def _pretrain_cfg(self, steps: int, lr: float) -> TrainConfig:
        return self.cfg.train_config(num_steps=steps, learning_rate=lr, checkpoint_every=max(steps, 1),
                                     track_accuracy=False)

    @cached_property
    def theta0(self) -> ARModel:
        """Student before distillation: trained on the other teacher's style."""
        c = self.cfg
        store = train_run(ARModel(c.arch()), self.base_set, self._pretrain_cfg(c["base.steps"], c["base.learning_rate"]))
        log.info("base model trained", extra={"steps": c["base.steps"], "loss": store.losses[-1]})
        return store.final

    @cached_property
    def sft(self) -> CheckpointStore:
        """Plain distillation trajectory on the teacher traces."""
        store = train_run(self.theta0, self.train_set, self.cfg.train_config())
        self._check_store(store)
        log.info("sft trajectory", extra={"checkpoints": len(store), "final_loss": store.losses[-1],
                                          "final_acc": store.accuracies[-1]})
        return store

    def _check_store(self, store: CheckpointStore) -> None:
        require(len(store.losses) == len(store.accuracies) == len(store.snapshots) == len(store.steps),
                "checkpoint metrics misaligned with snapshots")
        require(all(a < b for a, b in zip(store.steps, store.steps[1:])), "checkpoint steps not increasing")

    @cached_property
    def bottleneck(self) -> int:
        return TJ.find_bottleneck(self.sft)

    @cached_property
    def profile(self) -> TJ.ConfidenceProfile:
        prof = TJ.profile_confidence(self.sft.model(0), self.sft.model(self.bottleneck), self.train_set)
        require(all(np.array_equal(d, b - a) for a, b, d in zip(prof.c0, prof.cb, prof.delta)),
                "delta confidence differs from cb - c0")
        return prof

    @cached_property
    def sets(self) -> TJ.SelectionSets:
        sets = TJ.select(self.profile, self.cfg["tau"])
        problems = TJ.check_sets(sets)
        require(not problems, "; ".join(problems[:3]))
        return sets

    # artifacts ---------------------------------------------------------------

    def write_store(self, rel: str, store: CheckpointStore, cfg: TrainConfig, keep: str | None = None) -> None:
        keep = keep or self.cfg["keep_checkpoints"]
        which = None if keep == "all" else sorted({0, len(store) - 1})
        store.save(self.bundle.root / rel, cfg, which)
        for p in sorted((self.bundle.root / rel).iterdir()):
            self.bundle.add(f"{rel}/{p.name}")

    def write_selection(self, rel: str, sets: TJ.SelectionSets) -> None:
        self.bundle.write_text(rel, TJ.format_selection(sets))

    def write_traces(self) -> None:
        self.bundle.write_text("traces.tsv", D.format_traces(self.train_set.examples))
        self.bundle.dataset_hash = self.train_set.digest()

    def metrics_chart(self, stores: dict[str, CheckpointStore], prefix: str = "", title: str = "") -> None:
        self.bundle.chart(f"{prefix}loss", f"{title}training loss", "step", "loss",
                          {k: (list(map(float, s.steps)), s.losses) for k, s in stores.items()})
        self.bundle.chart(f"{prefix}train_acc", f"{title}training accuracy", "step", "accuracy",
                          {k: (list(map(float, s.steps)), s.accuracies) for k, s in stores.items()})

    def base_summary(self) -> dict:
        s = self.sft
        b = self.bottleneck
        acc = s.accuracies
        valley = acc[b] < acc[0] and acc[-1] > acc[b]
        return {"bottleneck_index": b, "bottleneck_step": s.steps[b], "acc_theta0": acc[0], "acc_bottleneck": acc[b],
                "acc_final": acc[-1], "crash_then_recover": bool(valley),
                "anchor_fraction": self.sets.anchor_fraction(), "yet_to_learn_fraction": self.sets.yet_to_learn_fraction(),
                "tau": self.cfg["tau"]}

    def nll(self, model: ARModel, dataset) -> float:
        return full_weighted_loss(model, list(dataset), None)

    def dllm_cfg(self, **over) -> TrainConfig:
        c = self.cfg
        kw = dict(num_steps=c["dllm.num_steps"], learning_rate=c["dllm.learning_rate"],
                  checkpoint_every=c["dllm.checkpoint_every"], decode_steps=c["dllm.decode_steps"])
        kw.update(over)
        return c.train_config(**kw)

    @cached_property
    def rate(self):
        return TJ.uniform_rate(self.cfg["dllm.mask_low"], self.cfg["dllm.mask_high"])

    @cached_property
    def denoiser0(self) -> DenoiserModel:
        c = self.cfg
        steps = c["dllm.base_steps"]
        cfg = self.dllm_cfg(num_steps=steps, checkpoint_every=max(steps, 1), track_accuracy=False)
        store = dllm_train_run(DenoiserModel(c.arch()), self.base_set, cfg, TJ.random_mask_provider(self.rate))
        return store.final


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------


def _profile_rows(lab: Lab):
    for i, (c0, cb, d, toks) in enumerate(zip(lab.profile.c0, lab.profile.cb, lab.profile.delta, lab.profile.tokens)):
        for t in range(d.size):
            yield [i, t, int(toks[t]), D.VOCAB.decode([int(toks[t])])[0], float(c0[t]), float(cb[t]), float(d[t])]


def _ranking_rows(stats: TJ.ProfileStats):
    for kind, rows in (("increase", stats.top_increase), ("drop", stats.top_drop)):
        for r, (tok, agg, n) in enumerate(rows, 1):
            yield [kind, r, tok, D.VOCAB.decode([tok])[0], float(agg), n]


def preset_shock(lab: Lab) -> None:
    b = lab.bundle
    lab.write_traces()
    lab.write_store("trajectory", lab.sft, lab.cfg.train_config())
    b.write_text("metrics.csv", lab.sft.metrics_csv())
    lab.metrics_chart({"SFT": lab.sft})
    lab.write_selection("selection.txt", lab.sets)
    b.write_csv("profile.csv", ["example", "position", "token_id", "token", "c_theta0", "c_bottleneck", "delta"],
                _profile_rows(lab))
    stats = TJ.profile_stats(lab.profile, lab.sets, lab.cfg["topk"])
    b.write_csv("delta_rankings.csv", ["direction", "rank", "token_id", "token", "aggregate_delta", "count"],
                _ranking_rows(stats))
    b.summary.update(lab.base_summary())
    b.summary.update({"drop_fraction": stats.drop_fraction, "group_counts": stats.group_counts,
                      "num_positions": stats.num_positions})


def preset_rrt(lab: Lab) -> None:
    b = lab.bundle
    lab.write_traces()
    s, k = lab.sft, lab.bottleneck
    res = I.rrt(s.snapshots[0], s.snapshots[k], s.snapshots[-1], (0, k, len(s) - 1))
    require(np.array_equal(res.theta - s.snapshots[0], s.snapshots[-1] - s.snapshots[k]) or
            np.allclose(res.theta - s.snapshots[0], s.snapshots[-1] - s.snapshots[k], rtol=0, atol=1e-12),
            "RRT parameters differ from theta0 + (theta_f - theta_b)")
    rrt_model = s.model(0).with_params(res.theta)
    save_checkpoint(b.path("theta_rrt.bin"), s.arch, res.theta)
    b.add("theta_rrt.bin")
    rows = []
    for name, m in (("theta0", s.model(0)), ("bottleneck", s.model(k)), ("final", s.final), ("rrt", rrt_model)):
        rows.append([name, lab.nll(m, lab.train_set), D.train_accuracy(m, lab.train_set),
                     D.train_accuracy(m, lab.heldout_set)])
    b.write_csv("rrt.csv", ["model", "train_nll", "train_acc", "heldout_acc"], rows)
    b.write_text("metrics.csv", s.metrics_csv())
    lab.metrics_chart({"SFT": s})
    b.summary.update(lab.base_summary())
    b.summary.update({"rrt_delta_norm": res.delta_norm, "discarded_pre_bottleneck_norm": res.discarded_norm,
                      "indices": list(res.indices), **{f"{r[0]}_heldout_acc": r[3] for r in rows},
                      **{f"{r[0]}_train_acc": r[2] for r in rows}})


def _full_nll_series(lab: Lab, store: CheckpointStore) -> list[float]:
    return [lab.nll(store.model(k), lab.train_set) for k in range(len(store))]


def _masked_run(lab: Lab, name: str, rule) -> CheckpointStore:
    provider = TJ.weight_provider(lab.sets, rule)
    store = train_run(lab.theta0, lab.train_set, lab.cfg.train_config(), provider)
    lab._check_store(store)
    if provider.skipped:
        log.info("examples with empty objective trained with zero weight",
                 extra={"run": name, "count": len(provider.skipped)})
    return store


def _comparison(lab: Lab, runs: dict[str, CheckpointStore], rel: str = "comparison.csv") -> None:
    """Side-by-side accuracy and full (unmasked) NLL per checkpoint."""
    nll = {k: _full_nll_series(lab, s) for k, s in runs.items()}
    steps = next(iter(runs.values())).steps
    header = ["step"]
    for k in runs:
        header += [f"{k}_nll", f"{k}_acc"]
    rows = []
    for j, step in enumerate(steps):
        row = [step]
        for k, s in runs.items():
            row += [nll[k][j], s.accuracies[j]]
        rows.append(row)
    lab.bundle.write_csv(rel, header, rows)
    lab.bundle.chart("dynamics_acc", "training accuracy", "step", "accuracy",
                     {k: (list(map(float, s.steps)), s.accuracies) for k, s in runs.items()})
    lab.bundle.chart("dynamics_nll", "full token NLL", "step", "NLL",
                     {k: (list(map(float, runs[k].steps)), nll[k]) for k in runs})
    for k, s in runs.items():
        lab.bundle.summary[f"{k}_heldout_acc"] = D.train_accuracy(s.final, lab.heldout_set)
        lab.bundle.summary[f"{k}_final_train_acc"] = s.accuracies[-1]
        lab.bundle.summary[f"{k}_min_train_acc"] = min(s.accuracies)


def preset_t3s_ar(lab: Lab) -> None:
    b = lab.bundle
    lab.write_traces()
    lab.write_selection("selection.txt", lab.sets)
    t3s = _masked_run(lab, "t3s", TJ.t3s_ar_weights)
    lab.write_store("t3s_run", t3s, lab.cfg.train_config(), keep="ends")
    b.write_text("metrics.csv", t3s.metrics_csv())
    b.write_text("sft_metrics.csv", lab.sft.metrics_csv())
    b.summary.update(lab.base_summary())
    _comparison(lab, {"SFT": lab.sft, "T3S": t3s})
    b.summary["t3s_bottleneck_index"] = TJ.find_bottleneck(t3s)


def preset_minus_t3s(lab: Lab) -> None:
    b = lab.bundle
    lab.write_traces()
    lab.write_selection("selection.txt", lab.sets)
    minus = _masked_run(lab, "minus_t3s", TJ.inverse_t3s_weights)
    t3s = _masked_run(lab, "t3s", TJ.t3s_ar_weights)
    b.write_text("metrics.csv", minus.metrics_csv())
    b.summary.update(lab.base_summary())
    _comparison(lab, {"SFT": lab.sft, "T3S": t3s, "-T3S": minus})


def _generated_tokens(decoded) -> float:
    n = [d.index(D.EOS) + 1 if D.EOS in d else len(d) for d in decoded]
    return float(np.mean(n))


def _dllm_runs(lab: Lab, sets_by_name: dict[str, TJ.SelectionSets | None]) -> dict[str, CheckpointStore]:
    out = {}
    for name, sets in sets_by_name.items():
        provider = TJ.random_mask_provider(lab.rate) if sets is None else TJ.union_mask_provider(sets, lab.rate)
        out[name] = dllm_train_run(lab.denoiser0, lab.train_set, lab.dllm_cfg(), provider)
        lab._check_store(out[name])
    return out


def _union_superset_check(sets: TJ.SelectionSets, dataset, rate, seed: int, draws: int = 200) -> None:
    rng = np.random.default_rng(seed)
    for _ in range(draws):
        i = int(rng.integers(len(dataset)))
        m = TJ.union_mask(TJ.sample_random_mask(rate, dataset[i].T, len(dataset[i].prompt), rng), sets, i)
        require(bool(m[sets.yet_to_learn[i]].all()), "union mask does not cover the yet-to-learn set")


def preset_t3s_dllm(lab: Lab) -> None:
    b = lab.bundle
    lab.write_traces()
    lab.write_selection("selection.txt", lab.sets)
    _union_superset_check(lab.sets, lab.train_set, lab.rate, lab.seed)
    runs = _dllm_runs(lab, {"random": None, "T3S": lab.sets})
    b.write_text("metrics.csv", runs["T3S"].metrics_csv())
    b.write_text("baseline_metrics.csv", runs["random"].metrics_csv())
    lab.write_store("t3s_dllm_run", runs["T3S"], lab.dllm_cfg(), keep="ends")
    lab.metrics_chart(runs, prefix="dllm_", title="dLLM ")
    steps = runs["T3S"].steps
    b.write_csv("comparison.csv", ["step", "random_nll", "random_acc", "t3s_nll", "t3s_acc"],
                [[s, runs["random"].losses[j], runs["random"].accuracies[j], runs["T3S"].losses[j],
                  runs["T3S"].accuracies[j]] for j, s in enumerate(steps)])
    b.summary.update(lab.base_summary())
    dc = D.DecodeConfig(steps=lab.cfg["dllm.decode_steps"])
    for name, s in runs.items():
        decoded = D.decode_all(s.final, lab.heldout_set.examples, dc)
        b.summary[f"{name}_heldout_acc"] = float(np.mean([D.verify_answer(d, ex) for d, ex in zip(decoded, lab.heldout_set)]))
        b.summary[f"{name}_heldout_generated_tokens"] = _generated_tokens(decoded)
        b.summary[f"{name}_final_train_acc"] = s.accuracies[-1]
    b.summary["decode_schedule"] = "confidence-ordered, ceil(T/steps) positions per step"


def preset_tau_sweep(lab: Lab) -> None:
    b = lab.bundle
    lab.write_traces()
    rows = []
    dc = D.DecodeConfig(steps=lab.cfg["dllm.decode_steps"])
    for tau in lab.cfg.taus():
        sets = TJ.yet_to_learn_set(lab.profile, tau, TJ.anchor_set(lab.profile))
        require(not TJ.check_sets(sets), f"invalid sets at tau={tau}")
        b.write_text(f"selection_tau{tau:g}.txt", TJ.format_selection(sets))
        store = _dllm_runs(lab, {f"tau={tau:g}": sets})[f"tau={tau:g}"]
        rows.append([tau, sets.yet_to_learn_fraction(), sum(x.size for x in sets.yet_to_learn),
                     store.losses[-1], store.accuracies[-1], D.train_accuracy(store.final, lab.heldout_set, dc)])
    counts = [r[2] for r in rows]
    taus = [r[0] for r in rows]
    order = np.argsort(taus)
    require(all(counts[order[i]] >= counts[order[i + 1]] for i in range(len(order) - 1)),
            "|B(tau)| is not monotone non-increasing")
    b.write_csv("tau_sweep.csv", ["tau", "fraction_selected", "num_selected", "final_nll", "final_train_acc",
                                  "heldout_acc"], rows)
    b.chart("tau_sweep", "yet-to-learn fraction vs tau", "tau", "fraction",
            {"selected": (taus, [r[1] for r in rows])})
    b.chart("tau_sweep_acc", "dLLM accuracy vs tau", "tau", "accuracy",
            {"train": (taus, [r[4] for r in rows]), "heldout": (taus, [r[5] for r in rows])})
    b.summary.update(lab.base_summary())


def transfer_config(lab: Lab) -> TrainConfig:
    c = lab.cfg
    return c.train_config(num_steps=c["transfer.num_steps"], learning_rate=c["transfer.learning_rate"],
                          batch_size=len(lab.train_set), track_accuracy=False)


def preset_loss_transfer(lab: Lab) -> None:
    b = lab.bundle
    lab.write_traces()
    lab.write_selection("selection.txt", lab.sets)
    groups = I.split_easy_hard(lab.sets, lab.profile)
    theta0 = lab.sft.model(0)
    tm = I.loss_transfer_matrix(theta0, groups, lab.train_set, transfer_config(lab))
    I.save_transfer(b.root / "transfer", theta0, tm, groups)
    for p in sorted((b.root / "transfer").iterdir()):
        b.add(f"transfer/{p.name}")
    again = I.recompute_transfer(b.root / "transfer", lab.train_set)
    require(np.max(np.abs(again - tm.values)) <= 1e-9, "transfer matrix not reproducible from persisted checkpoints")
    b.write_text("transfer_matrix.csv", tm.to_csv())
    b.write_csv("transfer_baseline.csv", ["subset", "baseline_loss", "positions"],
                [[g, tm.baseline[g], sum(len(p) for p in groups[g])] for g in tm.labels])
    b.summary.update(lab.base_summary())
    b.summary["transfer_diagonal"] = {g: float(tm.values[i, i]) for i, g in enumerate(tm.labels)}
    b.summary["transfer_signs"] = {f"{s}->{t}": ("-" if tm.values[i, j] < 0 else "+")
                                   for i, s in enumerate(tm.labels) for j, t in enumerate(tm.labels)}


def preset_one_step(lab: Lab) -> None:
    b = lab.bundle
    lab.write_traces()
    lab.write_selection("selection.txt", lab.sets)
    sweep = I.anchor_one_step_sweep(lab.sft, lab.sets, lab.train_set, lab.cfg["one_step.learning_rate"])
    b.write_text("one_step.csv", sweep.to_csv())
    b.write_text("metrics.csv", lab.sft.metrics_csv())
    xs = list(map(float, sweep.steps))
    b.chart("delta_other", "change in non-anchor loss after one anchor-only step", "checkpoint step",
            "delta loss (other)", {"delta_other": (xs, sweep.delta_other)})
    b.chart("anchor_loss", "anchor-token loss", "checkpoint step", "loss", {"anchor": (xs, sweep.anchor_loss)})
    b.summary.update(lab.base_summary())
    b.summary.update({"skipped_examples": sweep.skipped_examples, "delta_other_first": sweep.delta_other[0],
                      "delta_other_last": sweep.delta_other[-1]})


def preset_static_baselines(lab: Lab) -> None:
    b = lab.bundle
    lab.write_traces()
    lab.write_selection("selection.txt", lab.sets)
    n_anchor = sum(a.size for a in lab.sets.anchors)
    N = lab.profile.num_positions
    p = lab.cfg["static.p"] if lab.cfg["static.p"] >= 0 else n_anchor / N
    runs = {"T3S": _masked_run(lab, "t3s", TJ.t3s_ar_weights)}
    counts = {}
    for direction in ("highest", "lowest"):
        ws = I.static_confidence_weights(lab.profile, p, direction)
        counts[direction] = int(sum((w == 0).sum() for w in ws))
        if lab.cfg["static.p"] < 0:
            require(abs(counts[direction] - n_anchor) <= 1, f"static budget {counts[direction]} vs anchors {n_anchor}")
        runs[f"{direction}-top-p"] = train_run(lab.theta0, lab.train_set, lab.cfg.train_config(),
                                               lambda i, ex, ws=ws: ws[i])
    runs["SFT"] = lab.sft
    b.write_text("metrics.csv", runs["T3S"].metrics_csv())
    _comparison(lab, runs)
    b.summary.update(lab.base_summary())
    b.summary.update({"p": p, "anchor_count": n_anchor, "masked_counts": counts, "num_positions": N})


def preset_sketch(lab: Lab) -> None:
    b = lab.bundle
    lab.write_traces()
    lab.write_selection("selection.txt", lab.sets)
    n = min(lab.cfg["sketch.num_examples"], len(lab.train_set))
    sub = lab.train_set.examples[:n]
    sub_sets = TJ.SelectionSets(lab.sets.anchors[:n], lab.sets.yet_to_learn[:n], lab.sets.lengths[:n], lab.sets.tau)
    table = I.gradient_sketch_table(lab.sft.model(lab.bottleneck), sub, lab.cfg["sketch.k"], lab.seed, sub_sets)
    b.write_text("sketch.csv", table.to_csv())
    scores = I.pca_2d(table.sketches)
    b.write_csv("sketch_pca.csv", ["example", "position", "group", "pc1", "pc2"],
                [[int(e), int(p), "anchor" if l else "other", float(s[0]), float(s[1])]
                 for e, p, l, s in zip(table.example, table.position, table.labels, scores)])
    groups = {g: (scores[table.labels == v, 0].tolist(), scores[table.labels == v, 1].tolist())
              for g, v in (("anchor", 1), ("other", 0)) if (table.labels == v).any()}
    b.chart("sketch_pca", "gradient sketches (PCA)", "pc1", "pc2", groups, markers_only=True)
    c0 = np.concatenate(lab.profile.c0[:n])
    b.write_csv("init_confidence.csv", ["example", "position", "group", "c_theta0"],
                [[int(e), int(p), "anchor" if l else "other", float(c)]
                 for e, p, l, c in zip(table.example, table.position, table.labels, c0)])
    b.summary.update(lab.base_summary())
    b.summary.update({"sketch_k": lab.cfg["sketch.k"], "sketch_positions": int(len(table.labels)),
                      "sketch_centroid_separability": I.separability(scores, table.labels),
                      "init_confidence_separability": I.separability(c0[:, None], table.labels)})


def preset_teacher_mix(lab: Lab) -> None:
    b = lab.bundle
    c = lab.cfg
    steps = c["mix.steps_per_teacher"]
    per_style, sets_by_style = [], []
    for style in (0, 1):
        ds = D.restyle(lab.train_set, style)
        store = train_run(lab.theta0, ds, c.train_config(num_steps=steps))
        k = TJ.find_bottleneck(store)
        prof = TJ.profile_confidence(store.model(0), store.model(k), ds)
        sets = TJ.select(prof, c["tau"])
        b.write_text(f"selection_style{style}.txt", TJ.format_selection(sets))
        per_style.append(ds)
        sets_by_style.append(sets)
        b.summary[f"style{style}_bottleneck_index"] = k
        b.summary[f"style{style}_anchor_fraction"] = sets.anchor_fraction()
    mixed = per_style[0].examples + per_style[1].examples
    n0 = len(per_style[0])

    def provider(i, ex):
        style, j = (0, i) if i < n0 else (1, i - n0)
        try:
            return TJ.t3s_ar_weights(ex.T, sets_by_style[style], j)
        except EmptyObjectiveError:
            return np.zeros(ex.T)

    mcfg = c.train_config(num_steps=2 * steps)
    b.write_text("traces.tsv", D.format_traces(mixed))
    b.dataset_hash = D.Dataset(mixed).digest()
    runs = {"SFT-mix": train_run(lab.theta0, mixed, mcfg), "T3S-mix": train_run(lab.theta0, mixed, mcfg, provider)}
    b.write_text("metrics.csv", runs["T3S-mix"].metrics_csv())
    b.write_text("sft_metrics.csv", runs["SFT-mix"].metrics_csv())
    lab.metrics_chart(runs)
    for name, s in runs.items():
        b.summary[f"{name}_heldout_acc"] = D.train_accuracy(s.final, lab.heldout_set)
        b.summary[f"{name}_final_train_acc"] = s.accuracies[-1]


def _external_selector(lab: Lab) -> tuple[ARModel, ARModel, str]:
    c = lab.cfg
    sel = c["selector"]
    if sel != "self":
        d = Path(sel)
        try:
            m0, mb = load_model(d / "theta0.bin"), load_model(d / "theta_b.bin")
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load external selector from {d}: {exc}") from None
        if not isinstance(m0, ARModel) or not isinstance(mb, ARModel):
            raise ConfigError("external selector checkpoints must be AR models")
        return m0, mb, str(d)
    arch = c.arch(embed_dim=c["cross.embed_dim"], num_heads=1, seed=c["seed"] + c["cross.seed_offset"])
    pre = train_run(ARModel(arch), lab.base_set, lab._pretrain_cfg(c["base.steps"], c["base.learning_rate"]))
    store = train_run(pre.final, lab.train_set, c.train_config(seed=c["seed"] + c["cross.seed_offset"]))
    k = TJ.find_bottleneck(store)
    return store.model(0), store.model(k), f"internal:embed_dim={arch.embed_dim},seed={arch.seed}"


def _jaccard(a: list[np.ndarray], b: list[np.ndarray]) -> float:
    inter = sum(np.intersect1d(x, y).size for x, y in zip(a, b))
    union = sum(np.union1d(x, y).size for x, y in zip(a, b))
    return inter / union if union else 1.0


def preset_cross_selector(lab: Lab) -> None:
    b = lab.bundle
    lab.write_traces()
    m0, mb, ident = _external_selector(lab)
    if m0.cfg.vocab_size != lab.theta0.cfg.vocab_size:
        raise ConfigError("external selector does not share the trainee's vocabulary")
    prof = TJ.profile_confidence(m0, mb, lab.train_set, selector=ident)
    ext = TJ.select(prof, lab.cfg["tau"])
    require(TJ.compatible_with(ext, lab.train_set), "external selection does not fit the trainee's dataset")
    require(not TJ.check_sets(ext), "external selection is structurally invalid")
    save_checkpoint(b.path("selector/theta0.bin"), m0.cfg, m0.params)
    save_checkpoint(b.path("selector/theta_b.bin"), mb.cfg, mb.params)
    b.add("selector/theta0.bin")
    b.add("selector/theta_b.bin")
    lab.write_selection("selection.txt", lab.sets)
    lab.write_selection("selection_external.txt", ext)
    runs = {"SFT": lab.sft}
    for name, sets in (("T3S-self", lab.sets), ("T3S-external", ext)):
        provider = TJ.weight_provider(sets, TJ.t3s_ar_weights)
        runs[name] = train_run(lab.theta0, lab.train_set, lab.cfg.train_config(), provider)
    b.write_text("metrics.csv", runs["T3S-external"].metrics_csv())
    _comparison(lab, runs)
    b.summary.update(lab.base_summary())
    b.summary.update({"selector": ident, "anchor_jaccard": _jaccard(lab.sets.anchors, ext.anchors),
                      "yet_to_learn_jaccard": _jaccard(lab.sets.yet_to_learn, ext.yet_to_learn),
                      "external_anchor_fraction": ext.anchor_fraction()})


RUNNERS = {
    "shock": preset_shock, "rrt": preset_rrt, "t3s_ar": preset_t3s_ar, "minus_t3s": preset_minus_t3s,
    "t3s_dllm": preset_t3s_dllm, "tau_sweep": preset_tau_sweep, "loss_transfer": preset_loss_transfer,
    "one_step": preset_one_step, "static_baselines": preset_static_baselines, "sketch": preset_sketch,
    "teacher_mix": preset_teacher_mix, "cross_selector": preset_cross_selector,
}
assert set(RUNNERS) == set(PRESETS)


def run_preset(name: str, config: ExperimentConfig, out_dir: str | Path) -> ReportBundle:
    if name not in RUNNERS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    config = config.with_overrides(preset=name)
    out = Path(out_dir)
    prepare_out_dir(out, name)
    bundle = ReportBundle(out, name, config.digest())
    handler = JsonLinesHandler(out / "log.jsonl")
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    try:
        bundle.write_text("config.txt", config.dumps())
        log.info("preset start", extra={"preset": name, "config_hash": bundle.config_hash})
        RUNNERS[name](Lab(config, bundle))
        log.info("preset done", extra={"preset": name, "artifacts": len(bundle.artifacts)})
    except Exception as exc:
        log.error("preset failed", extra={"preset": name, "error": f"{type(exc).__name__}: {exc}"})
        if isinstance(exc, (ConfigError, InvariantViolation, NumericalFailure)):
            raise
        if isinstance(exc, (ValueError, EmptyObjectiveError)):
            raise PresetError(f"{name}: {type(exc).__name__}: {exc}") from exc
        raise
    finally:
        log.removeHandler(handler)
        handler.close()
    bundle.finalize()
    return bundle

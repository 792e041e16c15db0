"""Command-line workflows: simulate -> fit -> evaluate, plus class-count selection.

Every subcommand resolves its parameters from flags, optionally backed by a
TOML config file (flags win), writes a ``manifest.json`` with the fully
resolved configuration, and is deterministic given the recorded seed: the
manifest can be passed back via ``--config`` to reproduce a run.  Exit codes:
0 success, 1 input error, 2 non-convergence (outputs are still written).
"""

from __future__ import annotations

import glob as globlib
import json
import sys
from pathlib import Path

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from .data import detect_scenario, load_dataset
from .engine import FitControls, ModelConfig, fit, select_k
from .errors import LcmTreeError
from .metrics import csmf_accuracy, top_cause_accuracy
from .simulate import SimulationDesign, simulate_dataset
from .tree import parse_tree


def _load_config(ctx, param, value):
    """Eager --config callback: seed click's default map from TOML or a manifest."""
    if not value:
        return None
    path = Path(value)
    if not path.exists():
        raise click.BadParameter(f"config file {value} does not exist")
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        section = doc.get("config", doc)
    else:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
        section = doc.get(ctx.command.name, doc)
    ctx.default_map = {**(ctx.default_map or {}), **section}
    return value


def _config_option():
    return click.option(
        "--config",
        callback=_load_config,
        expose_value=False,
        is_eager=True,
        help="TOML config file (or a manifest.json) supplying defaults; flags win.",
    )


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_manifest(outdir, command, resolved):
    _write_json(
        Path(outdir) / "manifest.json",
        {"command": command, "version": __version__, "config": resolved},
    )


def _ensure_outdir(out):
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _read_tree(path, leaves):
    text = Path(path).read_text()
    leaf_order = [s.strip() for s in leaves.split(",")] if leaves else None
    return parse_tree(text, leaf_order)


def _fail(message):
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


@click.group()
@click.version_option(__version__)
def main():
    """Tree-guided domain-adaptive latent class models."""


# -- simulate -------------------------------------------------------------------


@main.command()
@_config_option()
@click.option("--design", default="sim1", show_default=True, type=click.Choice(["sim1"]))
@click.option("--n", default=1000, show_default=True, help="Total subjects.")
@click.option("--j", default=20, show_default=True, help="Number of items.")
@click.option("--c", default=3, show_default=True, help="Number of causes.")
@click.option("--k", default=2, show_default=True, help="Number of classes.")
@click.option("--signal", default="strong", type=click.Choice(["strong", "weak"]), show_default=True)
@click.option("--allocation", default="balanced", type=click.Choice(["balanced", "unbalanced"]),
              show_default=True)
@click.option("--csmf", default="balanced", type=click.Choice(["balanced", "unbalanced"]),
              show_default=True)
@click.option("--missing-rate", default=0.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, help="Output directory.")
def simulate(design, n, j, c, k, signal, allocation, csmf, missing_rate, seed, out):
    """Generate a synthetic dataset plus ground truth files."""
    resolved = {
        "design": design, "n": n, "j": j, "c": c, "k": k, "signal": signal,
        "allocation": allocation, "csmf": csmf, "missing_rate": missing_rate, "seed": seed,
    }
    try:
        sim_design = SimulationDesign(
            n_total=n, n_items=j, n_causes=c, n_classes=k, signal=signal,
            allocation=allocation, csmf_mode=csmf, missing_rate=missing_rate, seed=seed,
        )
        dataset, truth, cause_tree = simulate_dataset(sim_design)
    except LcmTreeError as exc:
        _fail(exc)
    outdir = _ensure_outdir(out)
    (outdir / "data.csv").write_text(dataset.serialize())
    (outdir / "domain_tree.csv").write_text(sim_design.domain_tree.serialize())
    (outdir / "cause_tree.csv").write_text(cause_tree.serialize())
    truth_doc = truth.to_json_dict(dataset.cause_leaves, dataset.domain_leaves)
    truth_doc["subject_ids"] = list(dataset.subject_ids)
    _write_json(outdir / "truth.json", truth_doc)
    _write_manifest(outdir, "simulate", resolved)

    click.echo(f"wrote {dataset.n_subjects} subjects x {dataset.n_items} items to {outdir}")
    for g, leaf in enumerate(dataset.domain_leaves):
        frac = ", ".join(f"{v:.3f}" for v in truth.pi[g])
        click.echo(f"  domain {leaf}: {int(truth.domain_sizes[g])} subjects, csmf [{frac}]")


# -- fit --------------------------------------------------------------------------


def _parse_grouping(text):
    if not text:
        return None
    pattern = {}
    for chunk in text.split(","):
        node, _, value = chunk.partition("=")
        if value not in ("0", "1"):
            raise LcmTreeError(f"grouping entry {chunk!r} must look like node=0 or node=1")
        pattern[node.strip()] = int(value)
    return pattern


def _fit_inputs(data, domain_tree, cause_tree, domain_leaves, cause_leaves):
    dtree = _read_tree(domain_tree, domain_leaves)
    ctree = _read_tree(cause_tree, cause_leaves)
    dataset = load_dataset(Path(data).read_text(), dtree, ctree)
    return dataset, dtree, ctree


def _write_fit_outputs(outdir, result, scenario):
    doc = result.to_json_dict()
    doc["scenario"] = scenario.tag
    _write_json(outdir / "result.json", doc)
    lines = ["id," + ",".join(result.cause_leaves)]
    for sid, row in zip(result.target_ids, result.cause_probs):
        lines.append(sid + "," + ",".join(repr(float(v)) for v in row))
    (outdir / "e_matrix.csv").write_text("\n".join(lines) + "\n")
    lines = ["cause," + ",".join(result.domain_leaves[1:])]
    for c, cause in enumerate(result.cause_leaves):
        lines.append(cause + "," + ",".join(repr(float(v)) for v in result.cophenetic[c]))
    (outdir / "cophenetic.csv").write_text("\n".join(lines) + "\n")
    lines = ["iteration,elbo"]
    for t, v in enumerate(result.elbo_trace, start=1):
        lines.append(f"{t},{v!r}")
    (outdir / "elbo_trace.csv").write_text("\n".join(lines) + "\n")
    lines = ["cause,posterior_mean,dirichlet_param"]
    for c, cause in enumerate(result.cause_leaves):
        lines.append(f"{cause},{result.pi0_mean[c]!r},{result.pi0_dirichlet[c]!r}")
    (outdir / "pi0.csv").write_text("\n".join(lines) + "\n")


_FIT_MODE = click.Choice(
    ["domain-adaptive", "fixed-grouping", "complete-pooling", "no-domain-grouping"]
)


def _fit_options(fn):
    decorators = [
        click.option("--data", required=True),
        click.option("--domain-tree", "domain_tree", required=True),
        click.option("--cause-tree", "cause_tree", required=True),
        click.option("--domain-leaves", "domain_leaves", default=None,
                     help="Comma-separated leaf order; first leaf is the target domain."),
        click.option("--cause-leaves", "cause_leaves", default=None),
        click.option("--mode", default="domain-adaptive", type=_FIT_MODE, show_default=True),
        click.option("--grouping", default=None,
                     help="node=0/1 pairs for fixed-grouping, comma-separated."),
        click.option("--slab-a", default=1.0, show_default=True),
        click.option("--slab-b", default=1.0, show_default=True),
        click.option("--csmf-prior", default=1.0, show_default=True),
        click.option("--tol", default=1e-8, show_default=True),
        click.option("--hyper-tol", default=1e-4, show_default=True),
        click.option("--hyper-interval", default=10, show_default=True),
        click.option("--bound-interval", default=1, show_default=True),
        click.option("--max-iters", default=2000, show_default=True),
        click.option("--restarts", default=5, show_default=True),
        click.option("--no-hyper", is_flag=True, default=False,
                     help="Freeze the diffusion variances at 1."),
        click.option("--jobs", default=1, show_default=True,
                     help="Parallel restarts; sweep order inside a fit stays fixed."),
        click.option("--seed", default=0, show_default=True),
        click.option("--out", required=True),
    ]
    for dec in reversed(decorators):
        fn = dec(fn)
    return fn


def _build_config_controls(k, mode, grouping, slab_a, slab_b, csmf_prior, tol, hyper_tol,
                           hyper_interval, bound_interval, max_iters, restarts, no_hyper,
                           jobs, seed):
    config = ModelConfig(
        n_classes=k,
        slab_a=slab_a,
        slab_b=slab_b,
        csmf_prior=csmf_prior,
        comparator=mode.replace("-", "_"),
        grouping=_parse_grouping(grouping),
    )
    controls = FitControls(
        tol=tol,
        hyper_tol=hyper_tol,
        hyper_interval=hyper_interval,
        bound_interval=bound_interval,
        max_iters=max_iters,
        n_restarts=restarts,
        seed=seed,
        update_hyper=not no_hyper,
        n_jobs=jobs,
    )
    return config, controls


@main.command(name="fit")
@_config_option()
@_fit_options
@click.option("--k", default=2, show_default=True, help="Number of latent classes.")
@click.option("--select-k", "select_k_list", default=None,
              help="Comma-separated candidate K list; overrides --k.")
def fit_cmd(data, domain_tree, cause_tree, domain_leaves, cause_leaves, mode, grouping,
            slab_a, slab_b, csmf_prior, tol, hyper_tol, hyper_interval, bound_interval,
            max_iters, restarts, no_hyper, jobs, seed, out, k, select_k_list):
    """Fit the model to a dataset; writes result JSON and CSV exports."""
    resolved = {
        "data": data, "domain_tree": domain_tree, "cause_tree": cause_tree,
        "domain_leaves": domain_leaves, "cause_leaves": cause_leaves, "mode": mode,
        "grouping": grouping, "slab_a": slab_a, "slab_b": slab_b, "csmf_prior": csmf_prior,
        "tol": tol, "hyper_tol": hyper_tol, "hyper_interval": hyper_interval,
        "bound_interval": bound_interval, "max_iters": max_iters, "restarts": restarts,
        "no_hyper": no_hyper, "jobs": jobs, "seed": seed, "k": k,
        "select_k": select_k_list,
    }
    try:
        dataset, dtree, ctree = _fit_inputs(data, domain_tree, cause_tree,
                                            domain_leaves, cause_leaves)
        config, controls = _build_config_controls(
            k, mode, grouping, slab_a, slab_b, csmf_prior, tol, hyper_tol, hyper_interval,
            bound_interval, max_iters, restarts, no_hyper, jobs, seed,
        )
        scenario = detect_scenario(dataset)
        outdir = _ensure_outdir(out)
        if select_k_list:
            candidates = [int(v) for v in select_k_list.split(",")]
            selection = select_k(dataset, dtree, ctree, config, candidates, controls)
            result = selection.results[selection.selected_k]
            doc = selection.to_json_dict()
            _write_json(outdir / "select_k.json", doc)
            click.echo("K criterion (objective + log K!):")
            for kk, crit in sorted(selection.criteria.items()):
                marker = " *" if kk == selection.selected_k else ""
                click.echo(f"  K={kk}: {crit:.6f}{marker}")
        else:
            result = fit(dataset, dtree, ctree, config, controls)
    except LcmTreeError as exc:
        _fail(exc)
    _write_fit_outputs(outdir, result, scenario)
    _write_manifest(outdir, "fit", resolved)
    status = "converged" if result.converged else "NOT converged"
    click.echo(
        f"fit {status} after {result.n_iterations} sweeps; "
        f"final objective {result.final_elbo:.6f}; scenario {scenario.tag}"
    )
    if not result.converged:
        sys.exit(2)


@main.command(name="select-k")
@_config_option()
@_fit_options
@click.option("--candidates", required=True, help="Comma-separated candidate K list.")
@click.pass_context
def select_k_cmd(ctx, data, domain_tree, cause_tree, domain_leaves, cause_leaves, mode,
                 grouping, slab_a, slab_b, csmf_prior, tol, hyper_tol, hyper_interval,
                 bound_interval, max_iters, restarts, no_hyper, jobs, seed, out, candidates):
    """Fit every candidate class count and keep the best by objective + log K!."""
    ctx.invoke(
        fit_cmd, data=data, domain_tree=domain_tree, cause_tree=cause_tree,
        domain_leaves=domain_leaves, cause_leaves=cause_leaves, mode=mode, grouping=grouping,
        slab_a=slab_a, slab_b=slab_b, csmf_prior=csmf_prior, tol=tol, hyper_tol=hyper_tol,
        hyper_interval=hyper_interval, bound_interval=bound_interval, max_iters=max_iters,
        restarts=restarts, no_hyper=no_hyper, jobs=jobs, seed=seed, out=out, k=2,
        select_k_list=candidates,
    )


# -- evaluate --------------------------------------------------------------------


def _evaluate_single(result_doc, truth_doc):
    """Metrics for one run; returns a JSON-ready report dict."""
    report = {
        "comparator": result_doc.get("comparator"),
        "final_elbo": result_doc.get("final_elbo"),
        "converged": result_doc.get("converged"),
        "cophenetic": result_doc.get("cophenetic"),
        "pi0_mean": result_doc.get("pi0_mean"),
    }
    if truth_doc is None:
        return report
    target_leaf = result_doc["domain_leaves"][0]
    causes = result_doc["cause_leaves"]
    truth_causes = truth_doc["cause_leaves"]
    if set(causes) != set(truth_causes):
        raise LcmTreeError("result and truth disagree on the cause list")
    reorder = [truth_causes.index(c) for c in causes]
    truth_to_result = {reorder[i]: i for i in range(len(causes))}
    if "pi" in truth_doc and target_leaf in truth_doc["pi"]:
        truth_pi = np.asarray(truth_doc["pi"][target_leaf])[reorder]
    else:
        truth_pi = None
    id_to_y = dict(zip(truth_doc["subject_ids"], truth_doc["true_Y"]))
    ids = sorted(result_doc["cause_probs"].keys())
    probs = np.array([result_doc["cause_probs"][sid] for sid in ids])
    labels = np.array([truth_to_result[id_to_y[sid]] for sid in ids], dtype=np.int64)
    if truth_pi is None:
        # fall back on the empirical target-domain distribution
        truth_pi = np.bincount(labels, minlength=len(causes)) / labels.size
    est = np.asarray(result_doc["pi0_mean"])
    report["csmf_accuracy"] = float(csmf_accuracy(est, truth_pi))
    report["per_cause_abs_error"] = {
        c: float(abs(est[i] - truth_pi[i])) for i, c in enumerate(causes)
    }
    report["top_cause_accuracy"] = float(top_cause_accuracy(probs, labels))
    report["truth_pi"] = [float(v) for v in truth_pi]
    return report


@main.command()
@_config_option()
@click.option("--result", "result_path", default=None, help="result.json of a single run.")
@click.option("--truth", "truth_path", default=None, help="truth.json for that run.")
@click.option("--runs", default=None,
              help="Glob of run directories (each with result.json and truth.json).")
@click.option("--out", required=True)
def evaluate(result_path, truth_path, runs, out):
    """Score one fit against truth, or aggregate a directory of replicates."""
    resolved = {"result": result_path, "truth": truth_path, "runs": runs}
    outdir = _ensure_outdir(out)
    try:
        if runs:
            rows = []
            for run_dir in sorted(globlib.glob(runs)):
                rpath = Path(run_dir) / "result.json"
                tpath = Path(run_dir) / "truth.json"
                if not rpath.exists():
                    continue
                result_doc = json.loads(rpath.read_text())
                truth_doc = json.loads(tpath.read_text()) if tpath.exists() else None
                report = _evaluate_single(result_doc, truth_doc)
                report["run"] = run_dir
                rows.append(report)
            if not rows:
                raise LcmTreeError(f"no runs matched {runs!r}")
            lines = ["run,comparator,csmf_accuracy,top_cause_accuracy"]
            for row in rows:
                lines.append(
                    f'{row["run"]},{row.get("comparator")},'
                    f'{row.get("csmf_accuracy")},{row.get("top_cause_accuracy")}'
                )
            (outdir / "replicates.csv").write_text("\n".join(lines) + "\n")
            summary = {}
            by_mode = {}
            for row in rows:
                by_mode.setdefault(row.get("comparator"), []).append(row)
            for mode_name, group in sorted(by_mode.items(), key=lambda kv: str(kv[0])):
                accs = [r["csmf_accuracy"] for r in group if r.get("csmf_accuracy") is not None]
                summary[mode_name] = {
                    "n_runs": len(group),
                    "csmf_accuracy_mean": float(np.mean(accs)) if accs else None,
                    "csmf_accuracy_sd": float(np.std(accs)) if accs else None,
                }
                scored = [r for r in group if r.get("truth_pi") is not None]
                if scored:
                    from .metrics import rmse_by_cause

                    ests = np.array([r["pi0_mean"] for r in scored])
                    truths = np.array([r["truth_pi"] for r in scored])
                    summary[mode_name]["rmse_by_cause"] = [
                        float(v) for v in rmse_by_cause(ests, truths)
                    ]
            _write_json(outdir / "report.json", {"replicates": rows, "summary": summary})
            for mode_name, stats in summary.items():
                click.echo(f"{mode_name}: mean csmf accuracy {stats['csmf_accuracy_mean']}")
        else:
            if not result_path:
                raise LcmTreeError("provide --result (with optional --truth) or --runs")
            result_doc = json.loads(Path(result_path).read_text())
            truth_doc = json.loads(Path(truth_path).read_text()) if truth_path else None
            report = _evaluate_single(result_doc, truth_doc)
            _write_json(outdir / "report.json", report)
            lines = ["metric,value"]
            for key in ("csmf_accuracy", "top_cause_accuracy"):
                if key in report:
                    lines.append(f"{key},{report[key]}")
            (outdir / "report.csv").write_text("\n".join(lines) + "\n")
            shown = {k: v for k, v in report.items() if k not in ("cophenetic", "pi0_mean")}
            click.echo(json.dumps(shown, indent=2, sort_keys=True))
    except LcmTreeError as exc:
        _fail(exc)
    _write_manifest(outdir, "evaluate", resolved)


if __name__ == "__main__":
    main()

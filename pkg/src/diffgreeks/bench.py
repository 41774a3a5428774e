"""Experiment orchestration, relative-error reporting, benchmark suites.

Configs are structured-text (YAML) files selecting one pricing engine and
its parameters.  Suites run predeclared reduced-scale configurations of
the published benchmark experiments and write diffable CSV reports with a
provenance column per value.
"""

from __future__ import annotations

import csv
import importlib.resources as resources
import io
import time
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import fdm, mc, sdbs
from .closed_form import MargrabeInputs, margrabe_greeks, margrabe_price
from .errors import ConfigError, UsageError, ZeroReferenceError
from .market import MarketParams
from .payoffs import OptionSpec

ENGINES = ("closed_form", "mc", "fdm", "sdbs")

CSV_FIELDS = [
    "suite",
    "quantity",
    "estimate",
    "reference",
    "rerror",
    "std_err",
    "runtime_ms",
    "provenance",
]

# config-file training keys and their TrainConfig field names
_TRAIN_KEY_MAP = {
    "nEpoch": "n_epochs",
    "N": "n_steps",
    "batch": "batch",
    "w": "w",
    "w_T": "w_t",
    "lr_start": "lr_start",
    "lr_end": "lr_end",
    "adam_beta1": "beta1",
    "adam_beta2": "beta2",
    "adam_eps": "eps",
    "seed": "seed",
    "stop_gradient_target": "stop_gradient_target",
    "hidden": "hidden",
    "activation": "activation",
    "chunk_paths": "chunk_paths",
    "engine": "engine",
}


def rerror(exact: float, estimate: float) -> float:
    """|exact - estimate| / |exact|."""
    if exact == 0:
        raise ZeroReferenceError("relative error against a zero reference")
    return abs(exact - estimate) / abs(exact)


@dataclass
class ReportRow:
    quantity: str
    estimate: float | None
    reference: float | None = None
    rerror: float | None = None
    std_err: float | None = None
    runtime_ms: float | None = None
    provenance: str = ""
    suite: str = ""
    error: str | None = None


@dataclass
class ExperimentConfig:
    market: MarketParams
    option: OptionSpec
    engine: str
    mc_opts: dict = field(default_factory=dict)
    fdm_opts: dict = field(default_factory=dict)
    train: sdbs.TrainConfig | None = None
    reference: dict = field(default_factory=dict)


def _require(cfg: dict, key: str):
    if key not in cfg:
        raise ConfigError(f"missing config key {key!r}")
    return cfg[key]


def parse_market(cfg: dict) -> MarketParams:
    try:
        return MarketParams(
            r=float(_require(cfg, "r")),
            sigma=np.asarray(_require(cfg, "sigma"), dtype=float),
            corr=np.asarray(_require(cfg, "corr"), dtype=float),
            s0=np.asarray(_require(cfg, "s0"), dtype=float),
            T=float(_require(cfg, "T")),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad market parameters: {exc}") from exc


def parse_option(cfg: dict) -> OptionSpec:
    block = _require(cfg, "option")
    kind = _require(block, "kind")
    try:
        if kind == "exchange":
            return OptionSpec.exchange()
        if kind == "basket":
            return OptionSpec.basket(_require(block, "weights"), _require(block, "strike"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad option block: {exc}") from exc
    raise ConfigError(f"unknown option.kind {kind!r}")


def parse_train_config(block: dict) -> sdbs.TrainConfig:
    kwargs = {}
    for key, value in block.items():
        if key not in _TRAIN_KEY_MAP:
            raise ConfigError(f"unknown training key {key!r}")
        kwargs[_TRAIN_KEY_MAP[key]] = value
    if "n_epochs" not in kwargs:
        raise ConfigError("missing training key 'nEpoch'")
    if "hidden" in kwargs:
        kwargs["hidden"] = tuple(int(h) for h in kwargs["hidden"])
    try:
        return sdbs.TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad training config: {exc}") from exc


def parse_config(cfg: dict) -> ExperimentConfig:
    """Validate a config mapping; errors name the offending key."""
    market = parse_market(cfg)
    option = parse_option(cfg)
    engine = _require(cfg, "engine")
    if engine not in ENGINES:
        raise ConfigError(f"unknown engine {engine!r}; expected one of {ENGINES}")
    blocks = [e for e in ENGINES if e in cfg]
    if len(blocks) > 1:
        raise ConfigError(f"exactly one engine block allowed, found {blocks}")
    out = ExperimentConfig(market=market, option=option, engine=engine)
    # top-level simulation keys serve as defaults for the engine blocks
    sim_defaults = {k: cfg[k] for k in ("N", "batch", "seed") if k in cfg}
    if engine == "mc":
        out.mc_opts = dict(cfg.get("mc", {}))
        out.mc_opts.setdefault("seed", sim_defaults.get("seed", 0))
    elif engine == "fdm":
        out.fdm_opts = dict(cfg.get("fdm", {}))
    elif engine == "sdbs":
        block = dict(cfg.get("sdbs", {}))
        for key in ("N", "batch", "seed"):
            if key in sim_defaults and key not in block:
                block[key] = sim_defaults[key]
        out.train = parse_train_config(block)
    ref = cfg.get("reference", {})
    for quantity, entry in ref.items():
        if not isinstance(entry, dict) or "value" not in entry or "source" not in entry:
            raise ConfigError(
                f"reference.{quantity} must carry 'value' and 'source'"
            )
        out.reference[quantity] = (float(entry["value"]), str(entry["source"]))
    return out


def load_config_file(path) -> ExperimentConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} is not a mapping")
    return parse_config(raw)


def load_reference_values() -> dict:
    """Published benchmark constants shipped with the package."""
    with resources.files("diffgreeks").joinpath("data/reference_values.yaml").open() as fh:
        return yaml.safe_load(fh)


def _attach_reference(rows: list[ReportRow], reference: dict) -> None:
    for row in rows:
        if row.quantity in reference and row.estimate is not None:
            value, source = reference[row.quantity]
            row.reference = value
            row.provenance = source
            if value != 0:
                row.rerror = rerror(value, row.estimate)


def run_experiment(cfg: ExperimentConfig) -> list[ReportRow]:
    """Dispatch to the configured engine and collect report rows."""
    t0 = time.perf_counter()
    rows: list[ReportRow] = []
    if cfg.engine == "closed_form":
        inp = MargrabeInputs.from_market(cfg.market)
        price = margrabe_price(inp)
        delta, gamma, theta = margrabe_greeks(inp)
        rows = [
            ReportRow("price", price),
            ReportRow("delta_1", delta),
            ReportRow("gamma_1", gamma),
            ReportRow("theta", theta),
        ]
    elif cfg.engine == "mc":
        paths = int(cfg.mc_opts.get("paths", 100_000))
        seed = int(cfg.mc_opts.get("seed", 0))
        rep = mc.estimate_greeks(cfg.option, cfg.market, paths, seed)
        rows = [ReportRow("price", rep.price, std_err=rep.price_se)]
        for i in range(rep.delta.shape[0]):
            rows.append(ReportRow(f"delta_{i+1}", rep.delta[i], std_err=rep.delta_se[i]))
        for i in range(rep.gamma.shape[0]):
            rows.append(ReportRow(f"gamma_{i+1}", rep.gamma[i], std_err=rep.gamma_se[i]))
        rows.append(ReportRow("theta", rep.theta, std_err=rep.theta_se))
    elif cfg.engine == "fdm":
        opts = cfg.fdm_opts
        grid = fdm.FdmGrid(
            s_max=np.asarray(opts.get("s_max", [300.0] * cfg.market.n), dtype=float),
            m_s=np.asarray(opts.get("m_s", [100] * cfg.market.n), dtype=int),
            m_t=int(opts.get("m_t", 5000)),
            T=cfg.market.T,
        )
        u0, u1 = fdm.solve(cfg.option, cfg.market, grid, strict=bool(opts.get("strict", False)))
        node = grid.node_near(cfg.market.s0)
        delta, gamma, theta = fdm.fdm_greeks(u0, u1, grid, node)
        rows = [ReportRow("price", float(u0.u[node]))]
        for i in range(cfg.market.n):
            rows.append(ReportRow(f"delta_{i+1}", delta[i]))
        for i in range(cfg.market.n):
            rows.append(ReportRow(f"gamma_{i+1}", gamma[i]))
        rows.append(ReportRow("theta", theta))
        rows.append(ReportRow("cfl", grid.cfl_number(cfg.market)))
    elif cfg.engine == "sdbs":
        net, _ = sdbs.train(cfg.option, cfg.market, cfg.train)
        rep = sdbs.estimate(net, cfg.option, cfg.market)
        rows = [ReportRow("price", rep.price)]
        for i in range(cfg.market.n):
            rows.append(ReportRow(f"delta_{i+1}", rep.delta[i]))
        for i in range(cfg.market.n):
            rows.append(ReportRow(f"gamma_{i+1}", rep.gamma[i]))
        rows.append(ReportRow("theta", rep.theta))
    runtime_ms = (time.perf_counter() - t0) * 1e3
    for row in rows:
        row.runtime_ms = runtime_ms
    _attach_reference(rows, cfg.reference)
    return rows


def write_report(rows: list[ReportRow], path, stable: bool = False) -> None:
    """CSV report; `stable` zeroes wall times so files diff bit-for-bit."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS)
    writer.writeheader()
    for row in rows:
        runtime = 0.0 if stable else (row.runtime_ms if row.runtime_ms is not None else "")
        writer.writerow(
            {
                "suite": row.suite,
                "quantity": row.quantity,
                "estimate": "" if row.estimate is None else repr(float(row.estimate)),
                "reference": "" if row.reference is None else repr(float(row.reference)),
                "rerror": "" if row.rerror is None else f"{row.rerror:.6e}",
                "std_err": "" if row.std_err is None else repr(float(row.std_err)),
                "runtime_ms": runtime if runtime == "" else f"{float(runtime):.3f}",
                "provenance": row.provenance if row.error is None else f"error: {row.error}",
            }
        )
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def _exchange_benchmark_market() -> MarketParams:
    return MarketParams(
        r=0.1,
        sigma=np.array([0.4, 0.2]),
        corr=np.array([[1.0, 0.4], [0.4, 1.0]]),
        s0=np.array([60.0, 60.0]),
        T=1.0,
    )


def _basket_market(sigma) -> MarketParams:
    return MarketParams(
        r=0.06,
        sigma=np.asarray(sigma, dtype=float),
        corr=np.eye(4),
        s0=np.array([40.0, 50.0, 60.0, 70.0]),
        T=0.5,
    )


def _closed_form_reference(market: MarketParams) -> dict:
    inp = MargrabeInputs.from_market(market)
    price = margrabe_price(inp)
    delta, gamma, theta = margrabe_greeks(inp)
    return {
        "price": (price, "closed-form"),
        "delta_1": (delta, "closed-form"),
        "gamma_1": (gamma, "closed-form"),
        "theta": (theta, "closed-form"),
    }


def _desk_train_config(seed, n_epochs, activation="softplus", w=1.0):
    return sdbs.TrainConfig(
        n_epochs=n_epochs,
        n_steps=50,
        batch=1000,
        w=w,
        hidden=(16, 16, 16, 16),
        activation=activation,
        seed=seed,
    )


def _run_labeled(suite, label, cfg, rows):
    try:
        for row in run_experiment(cfg):
            row.suite = suite
            row.quantity = f"{label}/{row.quantity}"
            rows.append(row)
    except Exception as exc:  # suite keeps going past a failing row
        rows.append(
            ReportRow(
                quantity=label, estimate=None, suite=suite, error=f"{type(exc).__name__}: {exc}"
            )
        )


def bench_suite(
    name: str,
    out_path,
    seed: int = 0,
    max_paths: int | None = None,
    max_epochs: int | None = None,
    stable: bool = False,
):
    """Run one predeclared benchmark suite and write its CSV report."""
    refs = load_reference_values()
    rows: list[ReportRow] = []
    paths_cap = lambda n: min(n, max_paths) if max_paths else n
    epochs_cap = lambda n: min(n, max_epochs) if max_epochs else n

    if name == "table3":
        market = _exchange_benchmark_market()
        option = OptionSpec.exchange()
        t3 = refs["table3"]
        ref_exact = {
            q: (t3["exact"][qq], f"table3/exact/{qq}")
            for q, qq in [("price", "price"), ("delta_1", "delta"), ("gamma_1", "gamma"), ("theta", "theta")]
        }
        cf = ExperimentConfig(market, option, "closed_form", reference=ref_exact)
        _run_labeled(name, "closed_form", cf, rows)
        mc_cfg = ExperimentConfig(
            market, option, "mc", mc_opts={"paths": paths_cap(1_000_000), "seed": seed},
            reference=_closed_form_reference(market),
        )
        _run_labeled(name, "mc_1e6", mc_cfg, rows)
        ref_fdm1 = {
            q: (t3["fdm1"][qq], f"table3/fdm1/{qq}")
            for q, qq in [("price", "price"), ("delta_1", "delta"), ("gamma_1", "gamma"), ("theta", "theta")]
        }
        fdm_cfg = ExperimentConfig(
            market, option, "fdm",
            fdm_opts={"s_max": [300.0, 300.0], "m_s": [100, 100], "m_t": 5000},
            reference=ref_fdm1,
        )
        _run_labeled(name, "fdm1", fdm_cfg, rows)
    elif name == "table4_desk":
        market = _exchange_benchmark_market()
        option = OptionSpec.exchange()
        cfg = ExperimentConfig(
            market, option, "sdbs", train=_desk_train_config(seed, epochs_cap(5000)),
            reference=_closed_form_reference(market),
        )
        _run_labeled(name, "sdbs_desk", cfg, rows)
    elif name == "table5":
        option = OptionSpec.exchange()
        for s1, s2 in refs["table5"]["pairs"]:
            market = MarketParams(
                r=0.1, sigma=np.array([0.4, 0.2]), corr=np.array([[1.0, 0.4], [0.4, 1.0]]),
                s0=np.array([float(s1), float(s2)]), T=1.0,
            )
            label = f"s{s1}_{s2}"
            cf = ExperimentConfig(market, option, "closed_form",
                                  reference=_closed_form_reference(market))
            _run_labeled(name, f"{label}/closed_form", cf, rows)
            mc_cfg = ExperimentConfig(
                market, option, "mc", mc_opts={"paths": paths_cap(1_000_000), "seed": seed},
                reference=_closed_form_reference(market),
            )
            _run_labeled(name, f"{label}/mc_1e6", mc_cfg, rows)
    elif name == "table6":
        for i, entry in enumerate(refs["table6"]):
            market = _basket_market(entry["sigma"])
            option = OptionSpec.basket([0.25] * 4, float(entry["strike"]))
            label = f"k{entry['strike']}_sig{'-'.join(str(s) for s in entry['sigma'])}"
            cfg = ExperimentConfig(
                market, option, "mc", mc_opts={"paths": paths_cap(1_000_000), "seed": seed + i},
                reference={"price": (entry["mc"], f"table6/mc/{label}")},
            )
            _run_labeled(name, label, cfg, rows)
    elif name == "table8_desk":
        market = _exchange_benchmark_market()
        option = OptionSpec.exchange()
        for w in refs["table8"]["weights"]:
            cfg = ExperimentConfig(
                market, option, "sdbs",
                train=_desk_train_config(seed, epochs_cap(1500), w=float(w)),
                reference=_closed_form_reference(market),
            )
            _run_labeled(name, f"w{w:g}", cfg, rows)
    elif name == "activation_desk":
        market = _exchange_benchmark_market()
        option = OptionSpec.exchange()
        for act in ("sigmoid", "tanh", "sin", "relu", "elu", "selu", "softplus"):
            cfg = ExperimentConfig(
                market, option, "sdbs",
                train=_desk_train_config(seed, epochs_cap(1500), activation=act),
                reference=_closed_form_reference(market),
            )
            _run_labeled(name, act, cfg, rows)
    else:
        raise UsageError(
            f"unknown suite {name!r}; valid suites: table3, table4_desk, table5, "
            "table6, table8_desk, activation_desk"
        )

    write_report(rows, out_path, stable=stable)
    return rows

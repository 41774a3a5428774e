"""Command-line interface: pricing engines, training, and benchmark suites."""

from __future__ import annotations

import csv
import sys

import click
import numpy as np

from . import bench, fdm, mc, sdbs
from .closed_form import MargrabeInputs, margrabe_greeks, margrabe_price
from .errors import DiffgreeksError
from .market import MarketParams
from .net import config_hash, load_checkpoint, save_checkpoint
from .payoffs import OptionSpec


@click.group()
def main():
    """Multi-asset option pricing lab: exact, MC, PDE and network engines."""


def _load(config):
    cfg = bench.load_config_file(config)
    return cfg


@main.command("price-exchange")
@click.option("--config", required=True, type=click.Path(exists=True))
def price_exchange(config):
    """Closed-form exchange option price and Greeks as a CSV row."""
    cfg = _load(config)
    inp = MargrabeInputs.from_market(cfg.market)
    price = margrabe_price(inp)
    delta, gamma, theta = margrabe_greeks(inp)
    click.echo("price,delta,gamma,theta")
    click.echo(f"{float(price)!r},{float(delta)!r},{float(gamma)!r},{float(theta)!r}")


@main.command("mc")
@click.option("--config", required=True, type=click.Path(exists=True))
@click.option("--paths", type=int, default=None, help="override path count")
@click.option("--seed", type=int, default=None, help="override RNG seed")
def mc_command(config, paths, seed):
    """Monte Carlo price and Greeks with standard errors."""
    cfg = _load(config)
    n_paths = paths if paths is not None else int(cfg.mc_opts.get("paths", 100_000))
    rng_seed = seed if seed is not None else int(cfg.mc_opts.get("seed", 0))
    rep = mc.estimate_greeks(cfg.option, cfg.market, n_paths, rng_seed)
    click.echo("estimator,value,std_err,paths")
    click.echo(f"price,{float(rep.price)!r},{float(rep.price_se)!r},{n_paths}")
    for i in range(rep.delta.shape[0]):
        click.echo(f"delta_{i+1},{float(rep.delta[i])!r},{float(rep.delta_se[i])!r},{n_paths}")
    for i in range(rep.gamma.shape[0]):
        click.echo(f"gamma_{i+1},{float(rep.gamma[i])!r},{float(rep.gamma_se[i])!r},{n_paths}")
    click.echo(f"theta,{float(rep.theta)!r},{float(rep.theta_se)!r},{n_paths}")


@main.command("fdm")
@click.option("--config", required=True, type=click.Path(exists=True))
@click.option("--s-max", type=float, default=None, help="upper price bound per asset")
@click.option("--m-s", type=int, default=None, help="spatial intervals per asset")
@click.option("--m-t", type=int, default=None, help="time intervals")
@click.option("--strict/--permissive", default=False, help="abort on unstable steps")
def fdm_command(config, s_max, m_s, m_t, strict):
    """Explicit finite-difference solve; reports Greeks and the CFL number."""
    cfg = _load(config)
    n = cfg.market.n
    opts = cfg.fdm_opts
    grid = fdm.FdmGrid(
        s_max=np.full(n, s_max) if s_max else np.asarray(opts.get("s_max", [300.0] * n)),
        m_s=np.full(n, m_s, dtype=int) if m_s else np.asarray(opts.get("m_s", [100] * n)),
        m_t=m_t if m_t else int(opts.get("m_t", 5000)),
        T=cfg.market.T,
    )
    u0, u1 = fdm.solve(cfg.option, cfg.market, grid, strict=strict)
    node = grid.node_near(cfg.market.s0)
    delta, gamma, theta = fdm.fdm_greeks(u0, u1, grid, node)
    header = (
        ["price"]
        + [f"delta{i+1}" for i in range(n)]
        + [f"gamma{i+1}" for i in range(n)]
        + ["theta", "cfl"]
    )
    values = (
        [u0.u[node]] + list(delta) + list(gamma) + [theta, grid.cfl_number(cfg.market)]
    )
    click.echo(",".join(header))
    click.echo(",".join(repr(float(v)) for v in values))


@main.command("train")
@click.option("--config", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(), help="checkpoint path (.npz)")
@click.option("--log", "log_path", type=click.Path(), default=None,
              help="loss log CSV (defaults to OUT.log.csv)")
def train_command(config, out, log_path):
    """Train the differential network and checkpoint the best model."""
    cfg = _load(config)
    if cfg.train is None:
        raise click.UsageError("config must select engine 'sdbs' with an sdbs block")
    net, log = sdbs.train(cfg.option, cfg.market, cfg.train)
    meta = {
        "config_hash": config_hash(cfg.train.as_dict()),
        "train": cfg.train.as_dict(),
        "market": {
            "r": cfg.market.r,
            "sigma": cfg.market.sigma.tolist(),
            "corr": cfg.market.corr.tolist(),
            "s0": cfg.market.s0.tolist(),
            "T": cfg.market.T,
        },
        "option": {
            "kind": cfg.option.kind,
            "weights": None if cfg.option.weights is None else cfg.option.weights.tolist(),
            "strike": cfg.option.strike,
        },
    }
    save_checkpoint(net, out, meta=meta)
    log_file = log_path or f"{out}.log.csv"
    with open(log_file, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "l_sde", "l_bs", "l_t", "total", "lr"])
        for row in log:
            writer.writerow(
                [row["epoch"], repr(row["l_sde"]), repr(row["l_bs"]),
                 repr(row["l_t"]), repr(row["total"]), repr(row["lr"])]
            )
    click.echo(f"checkpoint written to {out}; loss log to {log_file}")


@main.command("estimate")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--repeats", type=int, default=1)
@click.option("--seed", type=int, default=0)
def estimate_command(ckpt, repeats, seed):
    """Price and Greeks read from a trained checkpoint at (t=0, S(0))."""
    net, meta = load_checkpoint(ckpt)
    market = meta["market"]
    params = MarketParams(
        r=market["r"], sigma=np.asarray(market["sigma"]), corr=np.asarray(market["corr"]),
        s0=np.asarray(market["s0"]), T=market["T"],
    )
    opt = meta["option"]
    if opt["kind"] == "exchange":
        spec = OptionSpec.exchange()
    else:
        spec = OptionSpec.basket(opt["weights"], opt["strike"])
    rep = sdbs.estimate(net, spec, params, repeats=repeats, seed=seed)
    n = params.n
    header = (
        ["price"] + [f"delta_{i+1}" for i in range(n)]
        + [f"gamma_{i+1}" for i in range(n)] + ["theta"]
    )
    click.echo(",".join(header))
    click.echo(
        ",".join(repr(float(v)) for v in [rep.price, *rep.delta, *rep.gamma, rep.theta])
    )


@main.command("bench")
@click.argument("suite")
@click.option("--out", type=click.Path(), default=None, help="report CSV path")
@click.option("--seed", type=int, default=0)
@click.option("--max-paths", type=int, default=None, help="cap Monte Carlo paths")
@click.option("--max-epochs", type=int, default=None, help="cap training epochs")
@click.option("--stable", is_flag=True, help="zero wall times for diffable reports")
def bench_command(suite, out, seed, max_paths, max_epochs, stable):
    """Run a benchmark suite: table3, table4_desk, table5, table6,
    table8_desk or activation_desk."""
    out_path = out or f"{suite}.csv"
    try:
        rows = bench.bench_suite(
            suite, out_path, seed=seed, max_paths=max_paths,
            max_epochs=max_epochs, stable=stable,
        )
    except DiffgreeksError as exc:
        raise click.UsageError(str(exc)) from exc
    failed = [r for r in rows if r.error is not None]
    click.echo(f"{len(rows)} rows written to {out_path}" +
               (f" ({len(failed)} failed)" if failed else ""))
    if failed:
        sys.exit(1)


if __name__ == "__main__":
    main()

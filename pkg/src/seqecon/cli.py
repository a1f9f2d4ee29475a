"""Command-line entry point: train / evaluate / simulate / oracle / compare /
sweep, all driven by a single config file.

Files are the only interface: config in, CSVs + checkpoints + manifest out.
Exit codes: 0 success, 1 usage or config error, 2 numerical failure (with a
diagnostics file in the output directory).
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import autodiff as ad
from . import nn, oracles, reporting
from .config import ConfigError, load_config
from .growth import GrowthCalib, GrowthModel, closed_form_policy, simulate_episode, \
    train_growth, truncation_sweep
from .hetero import HetCalib, HetModel, StepSettings, LossWeights as HetWeights, \
    default_schedule, error_report, five_step_schedule
from .olg import OlgCalib, OlgModel, bond_homotopy, cohort_error_stats
from .kernel import CrraUtility
from .stoch import Ar1Spec


def _limit_threads(n):
    if n and n > 0:
        try:
            import threadpoolctl
            threadpoolctl.threadpool_limits(n)
        except ImportError:
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS"):
                if os.environ.get(var) != str(n):
                    print(f"note: set {var}={n} before launch for a hard "
                          f"single-thread guarantee", file=sys.stderr)
            return


# ---------------------------------------------------------------------------
# model builders
# ---------------------------------------------------------------------------

def build_growth(cfg):
    calib = GrowthCalib(**cfg.calibration)
    h = cfg.hyper
    if h["N_output"] != 1:
        raise ConfigError("[hyper] N_output must be 1 for the growth model")
    hidden = (h["N_hidden1"], h["N_hidden2"], h["N_hidden3"])
    return GrowthModel(calib, T=h["T"], hidden=hidden, n_quad=h["N_quad"],
                       seed=cfg.seed)


def build_olg(cfg):
    calib = OlgCalib(**cfg.calibration)
    h = cfg.hyper
    hidden = (h["N_hidden1"], h["N_hidden2"], h["N_hidden3"])
    return OlgModel(calib, T=h["T"], hidden=hidden, n_quad=h["N_quad"],
                    seed=cfg.seed)


def build_hetero(cfg):
    c = dict(cfg.calibration)
    fix_wage = c.pop("fix_wage")
    if np.isnan(fix_wage):
        fix_wage = None
    c["survival"] = c.pop("Gamma_surv")
    c["s_smooth"] = c.pop("s")
    calib = HetCalib(**c)
    h = cfg.hyper
    hidden = (h["N_hidden1"], h["N_hidden2"], h["N_hidden3"])
    return HetModel(calib, n_k=h["N_k"], n_theta=h["N_theta"], T=h["T"],
                    hidden=hidden, n_quad=h["N_quad"], seed=cfg.seed,
                    k_span=(h["k_lo"], h["k_hi"]), theta_max=h["theta_max"],
                    n_firm_samples=h["N_firm_samples"], fix_wage=fix_wage)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _initial_params(cfg, model):
    """Model parameters at the configured storage precision.

    float32 keeps the parameter vector and optimizer state in single
    precision (loosened reproducibility); intermediate arithmetic still
    promotes to float64.
    """
    dtype = np.float32 if cfg.precision == "float32" else np.float64
    params = model.init_params()
    if isinstance(params, dict):
        for p in params.values():
            p.values = p.values.astype(dtype)
    else:
        params.values = params.values.astype(dtype)
    return params


def cmd_train(cfg):
    started = time.time()
    os.makedirs(cfg.outdir, exist_ok=True)
    h = cfg.hyper
    if cfg.model == "growth":
        model = build_growth(cfg)
        result = train_growth(model, n_data=h["N_data"], n_minibatch=h["N_mb"],
                              n_episodes=h["N_episodes"],
                              learning_rate=h["alpha_learn"], seed=cfg.seed,
                              lr_decay=h["lr_decay"], lr_min=h["lr_min"],
                              params=_initial_params(cfg, model))
        nn.save_checkpoint(os.path.join(cfg.outdir, "checkpoint.ckpt"),
                           model.spec, result.params, result.state)
        reporting.write_csv(os.path.join(cfg.outdir, "loss_curve.csv"),
                            "loss_curve", result.loss_curve)
        reporting.write_manifest(cfg.outdir, cfg, started,
                                 {"flagged_residuals": result.flagged})
        return 0
    if cfg.model == "olg":
        model = build_olg(cfg)
        result = bond_homotopy(
            model, n_data=h["N_data"], n_minibatch=h["N_mb"],
            episodes_step1=h["N_episodes_step1"], episodes_step2=h["N_episodes_step2"],
            episodes_step3=h["N_episodes_step3"], episodes_step4=h["N_episodes_step4"],
            n_increments=h["N_bond_steps"], learning_rate=h["alpha_learn"],
            seed=cfg.seed, params=_initial_params(cfg, model),
            lr_polish=h["alpha_learn_polish"] or None)
        nn.save_checkpoint(os.path.join(cfg.outdir, "checkpoint.ckpt"),
                           model.spec, result.params, result.state)
        reporting.write_csv(os.path.join(cfg.outdir, "loss_curve.csv"),
                            "loss_curve", [(e, l) for e, l in result.loss_curve])
        reporting.write_manifest(cfg.outdir, cfg, started,
                                 {"flagged_residuals": result.flagged,
                                  "diverged": result.diverged})
        if result.diverged:
            reporting.write_diagnostics(cfg.outdir, "training diverged; see checkpoint")
            return 2
        return 0
    if cfg.model == "hetero":
        model = build_hetero(cfg)
        schedule = default_schedule(h["N_episodes_step1"], h["N_episodes_step2"],
                                    h["N_episodes_step3"], h["N_episodes_step4"],
                                    h["N_episodes_step5"])
        result = five_step_schedule(
            model, n_data=h["N_data"], n_minibatch=h["N_mb"], schedule=schedule,
            learning_rate=h["alpha_learn"], seed=cfg.seed,
            params=_initial_params(cfg, model),
            newton_initial=h["newton_initial"], newton_late=h["newton_late"])
        for name, params in result.params.items():
            nn.save_checkpoint(os.path.join(cfg.outdir, f"net_{name}.ckpt"),
                               model.specs[name], params, result.opts[name])
        reporting.write_csv(os.path.join(cfg.outdir, "loss_curve.csv"),
                            "loss_curve_stepped", result.loss_curve)
        reporting.write_manifest(cfg.outdir, cfg, started,
                                 {"diagnostics": result.diagnostics,
                                  "diverged": result.diverged})
        if result.diverged:
            reporting.write_diagnostics(cfg.outdir, "training diverged; see checkpoints")
            return 2
        return 0
    raise ConfigError(f"unknown model {cfg.model}")


def _load_growth_net(cfg, checkpoint):
    model = build_growth(cfg)
    spec, params, state = nn.load_checkpoint(checkpoint)
    if spec != model.spec:
        raise ConfigError("checkpoint architecture does not match the config")
    return model, params


def _growth_ergodic(model, params, n, seed, extra_steps=60):
    data = model.burn_in(params, model.init_dataset(n, seed), seed)
    for j in range(extra_steps):
        data = simulate_episode(model, params, data, j, seed)
    return data


def cmd_evaluate(cfg, checkpoint, n_states=4096):
    started = time.time()
    os.makedirs(cfg.outdir, exist_ok=True)
    if cfg.model == "growth":
        model, params = _load_growth_net(cfg, checkpoint)
        data = _growth_ergodic(model, params, n_states, cfg.seed + 1)
        resid, flagged = model.euler_residuals(params.values, data)
        resid = np.abs(np.asarray(ad.value(resid)))
        rows = [{"group": "euler", "mean": float(resid.mean()),
                 "p90": float(np.percentile(resid, 90)),
                 "p99": float(np.percentile(resid, 99)),
                 "p99.9": float(np.percentile(resid, 99.9))}]
    elif cfg.model == "olg":
        model = build_olg(cfg)
        spec, params, _ = nn.load_checkpoint(checkpoint)
        if spec != model.spec:
            raise ConfigError("checkpoint architecture does not match the config")
        sim = model.burn_in(params, model.init_state(min(n_states, 2048), cfg.seed + 1),
                            cfg.seed + 1)
        rows = cohort_error_stats(model, params, sim)
    elif cfg.model == "hetero":
        model = build_hetero(cfg)
        params = {}
        for name in ("k", "lam", "c", "p"):
            path = os.path.join(checkpoint, f"net_{name}.ckpt")
            spec, p, _ = nn.load_checkpoint(path)
            if spec != model.specs[name]:
                raise ConfigError(f"net_{name} architecture does not match the config")
            params[name] = p
        state = model.init_state(min(n_states, 256), cfg.seed + 1)
        flats = {k: p.values for k, p in params.items()}
        for t in range(model.T):
            period = model.period_graph(flats, state, model.calib.adj(), 0.0, 1.0)
            targets = model.household_targets(period, state, n_newton=10)
            state = model.simulate_step(state, targets, period, t, cfg.seed + 1)
        report = error_report(model, params, state, seed=cfg.seed + 1)
        rows = [{"group": key, **val} for key, val in report.items()
                if isinstance(val, dict)]
    else:
        raise ConfigError(f"unknown model {cfg.model}")
    out = os.path.join(cfg.outdir, "error_distribution.csv")
    reporting.write_csv(out, "error_distribution", rows)
    reporting.write_manifest(cfg.outdir, cfg, started, {"command": "evaluate"})
    return 0


def cmd_simulate(cfg, checkpoint, periods):
    """Simulate forward from a checkpoint and export the shock/state panel."""
    started = time.time()
    os.makedirs(cfg.outdir, exist_ok=True)
    rows = []
    if cfg.model == "growth":
        model, params = _load_growth_net(cfg, checkpoint)
        n = min(cfg.hyper["N_data"], 256)
        data = model.burn_in(params, model.init_dataset(n, cfg.seed), cfg.seed)
        for t in range(periods):
            data = simulate_episode(model, params, data, t, cfg.seed)
            for i in range(n):
                rows.append((i, t, "eps_A", float(data.windows[i, 0, -1])))
                rows.append((i, t, "K", float(data.K[i])))
                rows.append((i, t, "log_A", float(data.log_A[i])))
    elif cfg.model == "olg":
        model = build_olg(cfg)
        spec, params, _ = nn.load_checkpoint(checkpoint)
        if spec != model.spec:
            raise ConfigError("checkpoint architecture does not match the config")
        n = min(cfg.hyper["N_data"], 256)
        sim = model.burn_in(params, model.init_state(n, cfg.seed), cfg.seed)
        labels = ("regime", "eps_A", "eps_delta")
        for t in range(periods):
            sim, _ = model.simulate_step(params, sim, model.T + t, cfg.seed)
            for i in range(n):
                for j, lab in enumerate(labels):
                    rows.append((i, t, lab, float(sim.windows[i, j, -1])))
                rows.append((i, t, "K", float(sim.capital[i].sum())))
    elif cfg.model == "hetero":
        model = build_hetero(cfg)
        params = {}
        for name in ("k", "lam", "c", "p"):
            spec, p, _ = nn.load_checkpoint(os.path.join(checkpoint, f"net_{name}.ckpt"))
            if spec != model.specs[name]:
                raise ConfigError(f"net_{name} architecture does not match the config")
            params[name] = p
        n = min(cfg.hyper["N_data"], 64)
        state = model.init_state(n, cfg.seed)
        flats = {k: p.values for k, p in params.items()}
        for t in range(periods):
            period = model.period_graph(flats, state, model.calib.adj(), 0.0, 0.0)
            targets = model.household_targets(period, state, n_newton=10)
            state = model.simulate_step(state, targets, period, t, cfg.seed)
            for i in range(n):
                rows.append((i, t, "eps_A", float(state.windows[i, 0, -1])))
                rows.append((i, t, "regime", float(state.windows[i, 1, -1])))
                rows.append((i, t, "price", float(targets.price[i])))
    else:
        raise ConfigError(f"unknown model {cfg.model}")
    reporting.write_csv(os.path.join(cfg.outdir, "shock_panel.csv"),
                        "shock_panel", rows)
    reporting.write_manifest(cfg.outdir, cfg, started, {"command": "simulate"})
    return 0


def cmd_oracle(cfg, which):
    started = time.time()
    os.makedirs(cfg.outdir, exist_ok=True)
    if which == "growth":
        model = build_growth(cfg)
        sol = oracles.pti_growth(model.calib, n_quad=cfg.hyper["N_quad"])
        rows = []
        for ia in range(sol.log_a_grid.size):
            for ik in range(sol.k_grid.size):
                rows.append((ia, float(sol.k_grid[ik]), float(sol.policy[ia, ik])))
        reporting.write_csv(os.path.join(cfg.outdir, "oracle_growth_policy.csv"),
                            "policy_grid", rows)
        np.savez(os.path.join(cfg.outdir, "oracle_growth.npz"),
                 k_grid=sol.k_grid, log_a_grid=sol.log_a_grid, policy=sol.policy)
    elif which == "olg":
        calib = cfg.calibration
        if calib["H"] > 4:
            raise ConfigError("the direct OLG oracle needs H <= 4")
        from .olg import default_labor_profile
        small = oracles.OlgSmallCalib(
            H=calib["H"], gamma=calib["gamma"], beta=calib["beta"], B=calib["B"],
            xi_adj=calib["xi_adj"], delta=calib["delta_bar"], alpha=calib["alpha"],
            labor_profile=default_labor_profile(calib["H"]))
        sol = oracles.olg_small_solve(small)
        rows = [("price", sol.price), ("wage", sol.wage), ("rental", sol.rental)]
        rows += [(f"capital_age{h + 2}", float(k)) for h, k in enumerate(sol.capital)]
        rows += [(f"bonds_age{h + 2}", float(b)) for h, b in enumerate(sol.bonds)]
        rows += [(f"consumption_age{h + 1}", float(c)) for h, c in enumerate(sol.consumption)]
        rows.append(("max_abs_residual", float(np.max(np.abs(sol.residuals)))))
        reporting.write_csv(os.path.join(cfg.outdir, "oracle_olg.csv"),
                            "compare_stats", rows)
    elif which == "firm":
        model = build_hetero(cfg)
        c = model.calib
        wage = model.fix_wage if model.fix_wage is not None else 0.7
        sol = oracles.firm_vfi(np.asarray(c.z_levels), c.pi_z_low(), wage, c.beta,
                               c.survival, c.alpha, c.zeta, c.delta,
                               c.adj(), d_floor=c.d_floor,
                               k_grid=model.k_grid.nodes)
        rows = [(iz, float(sol.k_grid[ik]), float(sol.policy[iz, ik]))
                for iz in range(3) for ik in range(sol.k_grid.size)]
        reporting.write_csv(os.path.join(cfg.outdir, "oracle_firm_policy.csv"),
                            "policy_grid", rows)
    elif which == "egm":
        model = build_hetero(cfg)
        c = model.calib
        r = 0.5 * (1.0 / c.beta - 1.0)
        prob = oracles.SavingsProblem(
            u=CrraUtility(c.gamma), beta=c.beta, chain=model.hh_chain,
            incomes=model.hh_chain.states.copy(), payout=1.0 + r, price=1.0,
            grid=model.theta_grid)
        cons, iters = oracles.stationary_egm(prob)
        rows = [(e, float(model.theta_grid.nodes[j]), float(cons[e, j]))
                for e in range(2) for j in range(model.n_theta)]
        reporting.write_csv(os.path.join(cfg.outdir, "oracle_egm_policy.csv"),
                            "policy_grid", rows)
    else:
        raise ConfigError(f"unknown oracle {which!r}")
    reporting.write_manifest(cfg.outdir, cfg, started, {"command": f"oracle {which}"})
    return 0


def cmd_compare(cfg, checkpoint, n_states=4096):
    started = time.time()
    os.makedirs(cfg.outdir, exist_ok=True)
    if cfg.model != "growth":
        raise ConfigError("compare is defined for the growth model")
    model, params = _load_growth_net(cfg, checkpoint)
    pti = oracles.pti_growth(model.calib, n_quad=cfg.hyper["N_quad"])
    data = _growth_ergodic(model, params, n_states, cfg.seed + 2)
    calib = model.calib
    s = np.asarray(ad.value(model.savings_rate(params.values, data.inputs())))
    A = np.exp(data.log_A)
    k_net = s * (A * data.K ** calib.alpha + (1 - calib.delta) * data.K)
    stats, excluded = oracles.compare_policies(A, data.K, k_net, pti)
    resid, _ = model.euler_residuals(params.values, data)
    resid = np.abs(np.asarray(ad.value(resid)))
    rows = [("policy_gap_mean", stats["mean"]), ("policy_gap_p90", stats["p90"]),
            ("policy_gap_p99", stats["p99"]), ("policy_gap_p99.9", stats["p99.9"]),
            ("excluded_states", excluded),
            ("euler_abs_mean", float(resid.mean())),
            ("euler_abs_p99.9", float(np.percentile(resid, 99.9)))]
    reporting.write_csv(os.path.join(cfg.outdir, "compare_growth.csv"),
                        "compare_stats", rows)
    reporting.write_manifest(cfg.outdir, cfg, started, {"command": "compare"})
    return 0


def cmd_sweep(cfg, t_values):
    started = time.time()
    os.makedirs(cfg.outdir, exist_ok=True)
    if cfg.model != "growth":
        raise ConfigError("sweep is defined for the growth model")
    model = build_growth(cfg)
    calib = model.calib
    if calib.delta == 1.0 and calib.gamma == 1.0:
        policy = closed_form_policy(calib)
        mode = "levels"
    else:
        pti = oracles.pti_growth(calib, n_quad=cfg.hyper["N_quad"])
        policy = pti.policy_at
        mode = "innovations"
    sweep = truncation_sweep(calib, t_values, policy, seed=cfg.seed, mode=mode)
    reporting.write_csv(os.path.join(cfg.outdir, "truncation_sweep.csv"),
                        "truncation_sweep", sweep.rows)
    reporting.write_manifest(cfg.outdir, cfg, started,
                             {"command": "sweep", "fitted_rate": sweep.fitted_rate})
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="seqecon",
        description="Train and check shock-history equilibrium policies")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "evaluate", "simulate", "oracle", "compare", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        if name in ("evaluate", "simulate", "compare"):
            p.add_argument("--checkpoint", required=True,
                           help="checkpoint file (growth/olg) or directory (hetero)")
        if name in ("evaluate", "compare"):
            p.add_argument("--states", type=int, default=4096)
        if name == "simulate":
            p.add_argument("--periods", type=int, default=200)
        if name == "oracle":
            p.add_argument("which", choices=("growth", "olg", "firm", "egm"))
        if name == "sweep":
            p.add_argument("--t-values", default="4,8,12,16,20,24,28,32")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        _limit_threads(cfg.threads)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.checkpoint, args.states)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.checkpoint, args.periods)
        if args.command == "oracle":
            return cmd_oracle(cfg, args.which)
        if args.command == "compare":
            return cmd_compare(cfg, args.checkpoint, args.states)
        if args.command == "sweep":
            t_values = [int(t) for t in args.t_values.split(",")]
            return cmd_sweep(cfg, t_values)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 1
    except (FloatingPointError, RuntimeError) as exc:
        outdir = cfg.outdir if "cfg" in locals() else "."
        reporting.write_diagnostics(outdir, str(exc))
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())

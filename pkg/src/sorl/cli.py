"""sorl command line: gen-data, train, eval, sweep, verify.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import verify
from .diffcore import MlpSpec, ParamStore
from .envworld import ENVS, get_env, generate_dataset, load_dataset, save_dataset
from .scale import InferenceConfig, evaluate, plot_sweep, scaling_sweep, write_sweep_csv
from .shortcut import NoiseSource, ShortcutPolicy, is_power_of_two
from .trainer import Critic, MetricsRow, TrainConfig, TrainState, train

log = logging.getLogger("sorl")

MODEL_HEADER = "# sorl-model v1"


class UsageError(Exception):
    """Bad user input; maps to exit code 2."""


# ---------------------------------------------------------------- config files


@dataclass
class RunConfig:
    train: TrainConfig
    env: str = "reach2goal"
    dataset: str = ""
    out_dir: str = "run"
    eval_every: int = 5000
    log_every: int = 0  # 0: same as eval_every
    eval_episodes: int = 50
    eval_seed: int = 0
    M_inf: int = 4
    N: int = 1

    RUN_KEYS = ("env", "dataset", "out_dir", "eval_every", "log_every", "eval_episodes", "eval_seed", "M_inf", "N")

    def inference(self) -> InferenceConfig:
        return InferenceConfig(self.M_inf, self.N, self.eval_episodes, self.eval_seed)


def _parse_value(key: str, raw: str, like):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float) or like is None:
            if like is None and raw.lower() in ("none", ""):
                return None
            return float(raw)
        if isinstance(like, tuple):
            return tuple(int(p) for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse value {raw!r}") from None


def parse_config(text: str) -> RunConfig:
    defaults_train = TrainConfig()
    defaults_run = RunConfig(defaults_train)
    train_kw, run_kw = {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in TrainConfig.field_names():
            train_kw[key] = _parse_value(key, value, getattr(defaults_train, key))
        elif key in RunConfig.RUN_KEYS:
            run_kw[key] = _parse_value(key, value, getattr(defaults_run, key))
        else:
            raise UsageError(f"unknown config key {key!r}")
    try:
        tc = TrainConfig(**train_kw)
    except ValueError as e:
        raise UsageError(f"invalid config: {e}") from None
    return RunConfig(tc, **run_kw)


def _fmt_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def format_config(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {_fmt_value(getattr(cfg.train, f.name))}" for f in fields(TrainConfig)]
    lines += [f"{k} = {_fmt_value(getattr(cfg, k))}" for k in RunConfig.RUN_KEYS]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- model files


def _write_store(lines: list[str], network: str, store: ParamStore) -> None:
    for name, t in store.params.items():
        a = np.atleast_2d(t.data) if t.data.ndim == 1 else t.data
        lines.append(f"[{network}.{name}]")
        lines.append(" ".join(str(d) for d in t.data.shape))
        lines.extend(" ".join(repr(float(v)) for v in row) for row in a)


def save_model(state: TrainState, path, env: str = "") -> None:
    p = state.policy
    header = (f"{MODEL_HEADER} obs_dim={p.obs_dim} action_dim={p.action_dim} M_disc={p.M_disc} "
              f"hidden_dims={','.join(map(str, p.spec.hidden_dims))} "
              f"critic_hidden_dims={','.join(map(str, state.critic.spec.hidden_dims))} "
              f"aggregation={state.critic.aggregation} env={env or '-'} step={state.step}")
    lines = [header]
    _write_store(lines, "policy", p.params)
    _write_store(lines, "policy_target", state.target_policy.params)
    _write_store(lines, "critic", state.critic.params)
    _write_store(lines, "critic_target", state.critic.target)
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_model_sections(lines: list[str]) -> dict[str, dict[str, np.ndarray]]:
    out: dict[str, dict[str, np.ndarray]] = {}
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        if not line:
            i += 1
            continue
        if not (line.startswith("[") and line.endswith("]")):
            raise ValueError(f"model file line {i + 1}: expected a [section]")
        network, name = line[1:-1].split(".", 1)
        shape = tuple(int(d) for d in lines[i + 1].split())
        n_rows = 1 if len(shape) == 1 else shape[0]
        vals = [float(v) for row in lines[i + 2:i + 2 + n_rows] for v in row.split()]
        arr = np.asarray(vals, dtype=np.float64)
        if arr.size != int(np.prod(shape)):
            raise ValueError(f"section [{network}.{name}]: expected {np.prod(shape)} values, got {arr.size}")
        out.setdefault(network, {})[name] = arr.reshape(shape)
        i += 2 + n_rows
    return out


def load_model(path) -> tuple[TrainState, dict[str, str]]:
    lines = Path(path).read_text().split("\n")
    if not lines or not lines[0].startswith(MODEL_HEADER + " "):
        raise ValueError(f"{path}: not a sorl model file")
    meta = dict(kv.split("=", 1) for kv in lines[0][len(MODEL_HEADER) + 1:].split())
    obs_dim, action_dim, M_disc = int(meta["obs_dim"]), int(meta["action_dim"]), int(meta["M_disc"])
    hidden = tuple(int(h) for h in meta["hidden_dims"].split(","))
    c_hidden = tuple(int(h) for h in meta.get("critic_hidden_dims", meta["hidden_dims"]).split(","))
    sections = _parse_model_sections(lines[1:])

    def store_from(network: str) -> ParamStore:
        s = ParamStore()
        for name, arr in sections[network].items():
            s.add(name, arr)
        return s

    pspec = MlpSpec(action_dim + obs_dim + 2, action_dim, hidden, False)
    policy = ShortcutPolicy(store_from("policy"), pspec, M_disc, action_dim, obs_dim)
    target = ShortcutPolicy(store_from("policy_target"), pspec, M_disc, action_dim, obs_dim)
    cspec = MlpSpec(obs_dim + action_dim + 1, 1, c_hidden, True)
    for network, spec, prefixes in (("policy", pspec, [""]), ("critic", cspec, ["q0.", "q1."])):
        want = {n for p in prefixes for n in spec.param_names(p)}
        if set(sections[network]) != want:
            raise ValueError(f"model file: {network} parameters do not match the header")
    critic = Critic(store_from("critic"), store_from("critic_target"), cspec, meta.get("aggregation", "mean"))
    return TrainState(policy, target, critic, int(meta.get("step", 0))), meta


# ---------------------------------------------------------------- metrics


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(rows: list[MetricsRow], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MetricsRow.COLUMNS)
        for r in rows:
            w.writerow([_cell(getattr(r, c)) for c in MetricsRow.COLUMNS])


def final_report(rows: list[MetricsRow], k: int = 3) -> dict:
    """Average of the last ``k`` evaluations (fewer if fewer exist)."""
    evals = [r for r in rows if r.eval_return is not None]
    last = evals[-k:]
    if not last:
        return {"evals": 0}
    return {
        "evals": len(last),
        "steps": [r.step for r in last],
        "mean_return": float(np.mean([r.eval_return for r in last])),
        "success_rate": float(np.mean([r.success_rate for r in last])),
    }


# ---------------------------------------------------------------- commands


def _budget(m: int) -> int:
    if not is_power_of_two(m):
        raise UsageError(f"M_inf must be a power of two, got {m}")
    return m


def _env(name: str):
    try:
        return get_env(name)
    except KeyError as e:
        raise UsageError(e.args[0]) from None


def cmd_gen_data(args) -> int:
    spec = _env(args.env)
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    ds = generate_dataset(spec, args.n, NoiseSource(args.seed))
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} transitions to {args.out}")
    return 0


def cmd_train(args) -> int:
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    cfg = parse_config(path.read_text())
    spec = _env(cfg.env)
    if not cfg.dataset or not Path(cfg.dataset).is_file():
        raise UsageError(f"dataset file not found: {cfg.dataset!r}")
    _budget(cfg.M_inf)
    cfg.inference().validate(cfg.train.M_disc)
    ds = load_dataset(cfg.dataset)
    if ds.env != spec.name or ds.obs_dim != spec.obs_dim or ds.action_dim != spec.action_dim:
        raise ValueError(f"dataset {cfg.dataset} does not match env {spec.name}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg))

    inf = cfg.inference()

    def hook(state):
        res = evaluate(state.policy, state.critic, spec, inf)
        log.info("step %d: return %.3f success %.3f", state.step, res.mean_return, res.success_rate)
        return res.mean_return, res.success_rate

    result = train(cfg.train, ds, hook, eval_every=cfg.eval_every, log_every=cfg.log_every or None)
    write_metrics_csv(result.rows, out / "metrics.csv")
    save_model(result.state, out / "model.txt", spec.name)
    rep = final_report(result.rows)
    lines = [f"{k} = {v}" for k, v in rep.items()]
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def _load_for_env(model_path: str, env: str):
    spec = _env(env)
    if not Path(model_path).is_file():
        raise UsageError(f"model file not found: {model_path}")
    state, _ = load_model(model_path)
    if state.policy.obs_dim != spec.obs_dim or state.policy.action_dim != spec.action_dim:
        raise ValueError(f"model dims (obs {state.policy.obs_dim}, act {state.policy.action_dim}) "
                         f"do not match env {spec.name} (obs {spec.obs_dim}, act {spec.action_dim})")
    return state, spec


def cmd_eval(args) -> int:
    _budget(args.m_inf)
    inf = InferenceConfig(args.m_inf, args.n, args.episodes, args.seed)
    if args.n < 1 or args.episodes < 1:
        raise UsageError("--n and --episodes must be >= 1")
    state, spec = _load_for_env(args.model, args.env)
    inf.validate(state.policy.M_disc)
    res = evaluate(state.policy, state.critic, spec, inf)
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("episode", "return", "length", "success"))
            for r in res.records:
                w.writerow((r.episode, repr(r.ret), r.length, int(r.success)))
    print(f"mean_return = {res.mean_return!r}")
    print(f"success_rate = {res.success_rate!r}")
    print(f"stderr = {res.stderr!r}")
    return 0


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def cmd_sweep(args) -> int:
    for m in args.m_inf:
        _budget(m)
    if min(args.n) < 1 or args.episodes < 1:
        raise UsageError("N values and --episodes must be >= 1")
    state, spec = _load_for_env(args.model, args.env)
    rows = scaling_sweep(state.policy, state.critic, spec, args.m_inf, args.n, args.episodes, args.seed)
    write_sweep_csv(rows, args.out)
    if args.plot:
        plot_sweep(rows, args.plot)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_verify(args) -> int:
    fn = verify.SUITES[args.suite]
    kwargs = {"seed": args.seed}
    if args.suite == "theorem1" and args.steps is not None:
        kwargs["steps"] = args.steps
    columns, rows, passed = fn(**kwargs)
    if args.out:
        verify.write_rows_csv(columns, rows, args.out)
    n_fail = sum(1 for r in rows if not r[-1])
    print(f"suite {args.suite}: {len(rows) - n_fail}/{len(rows)} rows satisfied, {'PASS' if passed else 'FAIL'}")
    return 0 if passed else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sorl", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate an offline dataset")
    p.add_argument("--env", required=True, help=f"one of: {', '.join(sorted(ENVS))}")
    p.add_argument("--n", type=int, required=True, help="number of transitions")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train from a key = value config file")
    p.add_argument("config")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--env", required=True)
    p.add_argument("--m-inf", type=int, default=1)
    p.add_argument("--n", type=int, default=1, help="best-of-N candidates")
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="per-episode CSV")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="grid over M_inf and N")
    p.add_argument("--model", required=True)
    p.add_argument("--env", required=True)
    p.add_argument("--m-inf", type=_int_list, default=[1, 2, 4, 8])
    p.add_argument("--n", type=_int_list, default=[1])
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", help="optional PNG path (needs matplotlib)")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("verify", help="run a verification suite")
    p.add_argument("--suite", required=True, choices=sorted(verify.SUITES))
    p.add_argument("--out", help="CSV report path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, help="training steps for the theorem1 suite")
    p.set_defaults(fn=cmd_verify)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"sorl {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError, ArithmeticError) as e:
        print(f"sorl {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

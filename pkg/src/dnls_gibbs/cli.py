"""dnls-gibbs <command> --config <path> [--seed S] [--out PATH] [--format csv|json] [--workers W]

The config file uses INI sections: keys in [common] apply to every command and
keys in [<command>] override them; command-line flags override both.
"""

from __future__ import annotations

import argparse
import configparser
import sys

from .experiments import COMMANDS, ConfigError, ExperimentConfig, run
from .flows import BlowUpError, ModelParams
from .measures import MeasureSpec, StarvationError

# keys every command understands; anything else is handed to the command as an option
_CORE = {"beta", "alpha", "paper_gauge", "k", "n", "n_sweep", "t", "m", "seed", "out", "format", "workers",
         "variance_convention", "radii", "r0_restrict"}
_OPTIONS = {
    "conservation": {"initial", "mode", "amplitude", "mass", "decay", "dt", "n_samples", "tol_mass",
                     "tol_energy", "tol_phase", "table_out", "traj_out"},
    "liouville": {"n_states", "mass", "tol_trace", "h", "simplex_size", "dt", "tol_volume"},
    "gauge_suite": {"n_states", "sobolev_s", "scale", "n_logdet"},
    "decay_scan": {"ells", "band_limited", "dn_mode", "tol_zero", "tol_band", "max_slope"},
    "invariance": {"dt", "min_ess_fraction", "n_se", "tol_mass"},
    "flow_nearness": {"initial", "amplitude", "mass", "decay", "dt"},
}

_DEFAULTS = {
    "common": {"beta": "1.0", "k": "2", "n": "16", "n_sweep": "8,16,32,64", "t": "1.0", "m": "2000",
               "seed": "0", "format": "csv", "workers": "1", "variance_convention": "wick",
               "radii": "1.0,4.0", "r0_restrict": "0.1", "paper_gauge": "false"},
    "liouville": {"n": "4", "t": "0.5"},
    "gauge_suite": {"n": "32", "n_sweep": "4,8,16,32,64"},
    "decay_scan": {"paper_gauge": "true"},
    "invariance": {"paper_gauge": "true", "variance_convention": "physical", "n_sweep": "16,32,64"},
    "flow_nearness": {"n_sweep": "8,16,32,64", "beta": "1.0"},
}


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _floats(s: str) -> tuple:
    return tuple(float(x) for x in s.replace(";", ",").split(",") if x.strip())


def load_settings(command: str, path: str | None) -> dict:
    settings = dict(_DEFAULTS["common"])
    settings.update(_DEFAULTS.get(command, {}))
    if path is not None:
        cp = configparser.ConfigParser()
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        for section in ("common", command):
            if cp.has_section(section):
                for key, value in cp.items(section, raw=True):
                    settings[key.lower()] = value
    allowed = _CORE | _OPTIONS[command]
    unknown = sorted(set(settings) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys for {command}: {', '.join(unknown)}")
    return settings


def build_config(command: str, settings: dict) -> ExperimentConfig:
    try:
        beta = float(settings["beta"])
        k = int(settings["k"])
        N = int(settings["n"])
        if _bool(settings["paper_gauge"]):
            params = ModelParams.paper(beta, k, N)
        else:
            params = ModelParams(beta=beta, alpha=float(settings.get("alpha", 0.0)), k=k, N=N)
        measure = MeasureSpec(k=k, N=N, variance_convention=settings["variance_convention"],
                              radii=_floats(settings["radii"]), R0_restrict=float(settings["r0_restrict"]))
        sweep = tuple(int(x) for x in settings["n_sweep"].split(",") if x.strip())
        options = {key: settings[key] for key in _OPTIONS[command] if key in settings}
        return ExperimentConfig(
            command=command, params=params, measure=measure, N_sweep=sweep, T=float(settings["t"]),
            M=int(settings["m"]), seed=int(settings["seed"]), out=settings.get("out"),
            format=settings["format"], workers=int(settings["workers"]), options=options)
    except ConfigError:
        raise
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dnls-gibbs", description="DNLS gauge and Gibbs-measure experiments")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="INI file with [common] and per-command sections")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out")
    ap.add_argument("--format", choices=("csv", "json"))
    ap.add_argument("--workers", type=int)
    return ap


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    try:
        settings = load_settings(args.command, args.config)
        for key in ("seed", "out", "format", "workers"):
            val = getattr(args, key)
            if val is not None:
                settings[key] = str(val)
        cfg = build_config(args.command, settings)
        report = run(cfg)
    except ConfigError as exc:
        print(f"dnls-gibbs: config error: {exc}", file=sys.stderr)
        return 2
    except (BlowUpError, StarvationError, FloatingPointError) as exc:
        print(f"dnls-gibbs: numeric abort: {exc}", file=sys.stderr)
        return 3
    text = report.to_csv() if cfg.format == "csv" else report.to_json()
    if cfg.out:
        with open(cfg.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    print(f"dnls-gibbs: {cfg.command} finished in {report.wall_clock:.2f}s, "
          f"{'PASS' if report.passed else 'FAIL'}", file=sys.stderr)
    return report.exit_code()


if __name__ == "__main__":
    sys.exit(main())

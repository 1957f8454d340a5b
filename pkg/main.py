"""
Main Application for the Generative Predictive Control lab

Trains flow-matching policies on data from sampling-based predictive control
and evaluates SPC, GPC (policy alone) and GPC+ (policy samples inside SPC).
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

import config
from src import checkpoint
from src.envs import make_env
from src.errors import ConfigError, GpcError
from src.gpc import MODES, evaluate, train
from src.settings import load_config, write_resolved
from src.studies import benchmark, dr_study, multimodality_study, warm_start_study
from src.utils import console, print_banner, print_status, setup_logging, summary_table, write_csv

COMMANDS = ('train', 'eval', 'rollout', 'bench', 'study')
STUDIES = ('warm_start', 'dr', 'multimodality')

CHECKPOINT_NAME = 'checkpoint.json'
CURVES_COLUMNS = ['iteration', 'mean_cost', 'fit_loss', 'policy_best_fraction', 'wall_time']
REPORT_COLUMNS = ['episode', 'mode', 'alpha', 'cost_per_step', 'success', 'roughness']


class GpcLab:
    """Main application class: resolves configuration and runs one command"""

    def __init__(self, args: argparse.Namespace):
        """
        Args:
            args: Parsed command-line arguments
        """
        self.args = args
        setup_logging('DEBUG' if args.debug else config.LOG_LEVEL)
        print_banner("GENERATIVE PREDICTIVE CONTROL LAB")

        self.out_dir = Path(args.out)
        self.out_dir.mkdir(parents=True, exist_ok=True)

        self.ckpt = None
        self.cfg = load_config(args.config, env=args.env, seed=args.seed, workers=args.workers)
        if args.checkpoint:
            explicit_env = args.config is not None or args.env is not None
            self.ckpt = checkpoint.load(args.checkpoint,
                                        expected_env=self.cfg.env if explicit_env else None)
            if not explicit_env:
                self.cfg = load_config(None, **{**self.ckpt.cfg.as_dict(), 'seed': args.seed,
                                                'workers': args.workers})
            print_status(f"Loaded checkpoint {args.checkpoint} ({self.ckpt.hash[:12]})")

        self.env = make_env(self.cfg.env, self.cfg.episode_length)
        self.seed = self.cfg.seed
        write_resolved(self.cfg, self.out_dir)
        print_status(f"Environment: {self.cfg.env} | seed {self.seed} | workers {self.cfg.workers}")

    @property
    def model(self):
        return self.ckpt.model if self.ckpt else None

    def run(self) -> int:
        return getattr(self, f'cmd_{self.args.command}')()

    def cmd_train(self) -> int:
        t0 = time.perf_counter()
        model, stats = train(self.cfg, self.env)
        path = self.out_dir / CHECKPOINT_NAME
        digest = checkpoint.save(path, model, self.cfg, self.env.spec, stats)
        write_csv([s.row() for s in stats], self.out_dir / 'training_curves.csv', CURVES_COLUMNS)

        console.print(summary_table("Training curves", [s.row() for s in stats]))
        print_status(f"Checkpoint: {path} (hash {digest})")
        print_status(f"Total time: {time.perf_counter() - t0:.1f}s")
        return 0

    def _mode(self) -> str:
        return self.args.mode or ('gpc' if self.ckpt else 'spc')

    def cmd_eval(self) -> int:
        mode = self._mode()
        if mode != 'spc' and self.ckpt is None:
            raise ConfigError(f"mode '{mode}' needs --checkpoint")
        episodes = self.args.episodes or self.cfg.eval_episodes
        alpha = self.cfg.alpha if self.args.alpha is None else self.args.alpha
        report = evaluate(self.cfg, self.env, self.model, mode, episodes, alpha, self.seed)

        write_csv(report.rows(), self.out_dir / 'eval_report.csv', REPORT_COLUMNS)
        console.print(summary_table(f"{mode.upper()} on {self.cfg.env}", [report.summary()]))
        print_status(f"Mean cost per step: {report.mean_cost:.4f} ± {report.std_cost:.4f}")
        print_status(f"Success rate: {report.success_rate:.0%}", ok=report.success_rate > 0)
        return 0

    def cmd_rollout(self) -> int:
        mode = self._mode()
        if mode != 'spc' and self.ckpt is None:
            raise ConfigError(f"mode '{mode}' needs --checkpoint")
        alpha = self.cfg.alpha if self.args.alpha is None else self.args.alpha
        report = evaluate(self.cfg, self.env, self.model, mode, 1, alpha, self.seed)
        rows = trajectory_rows(self.env, report.episodes)

        path = write_csv(rows, self.out_dir / 'trajectory.csv')
        print_status(f"Trajectory: {path} ({len(rows)} steps, cost/step "
                     f"{report.mean_cost:.4f}, success {report.successes[0]})")
        return 0

    def cmd_bench(self) -> int:
        results = benchmark(self.cfg, self.env, self.model, steps=self.args.steps,
                            worker_counts=(1, 2, 4), seed=self.seed)
        write_csv(results['latency'], self.out_dir / 'bench_latency.csv')
        write_csv(results['throughput'], self.out_dir / 'bench_throughput.csv')
        console.print(summary_table("Planning latency per step", results['latency']))
        console.print(summary_table("Collection throughput", results['throughput']))
        return 0

    def cmd_study(self) -> int:
        name = self.args.study
        if name is None:
            raise ConfigError(f"study needs --study ({', '.join(STUDIES)})")
        episodes = self.args.episodes or self.cfg.eval_episodes

        if name == 'dr':
            rows = dr_study(self.cfg, episodes, self.seed)
        else:
            model = self.model
            if model is None:
                print_status("No checkpoint given, training a policy first", ok=False)
                model, _ = train(self.cfg, self.env)
            if name == 'warm_start':
                rows = warm_start_study(self.cfg, self.env, model, episodes, self.seed)
            else:
                rows = multimodality_study(self.env, model, self.seed,
                                           ode_step=self.cfg.ode_step)

        path = write_csv(rows, self.out_dir / f'study_{name}.csv')
        console.print(summary_table(f"Study: {name}", rows))
        print_status(f"Results: {path}")
        return 0


def trajectory_rows(env, episodes):
    """Per-step rows of the first episode: time, state, observation, action, running cost"""
    rows = []
    spec = env.spec
    for k in range(episodes.actions.shape[1]):
        if not np.all(np.isfinite(episodes.actions[0, k])):
            break
        row = {'step': k, 't': k * spec.ctrl_dt}
        row.update({f'q{i}': episodes.q[0, k, i] for i in range(spec.nq)})
        row.update({f'v{i}': episodes.v[0, k, i] for i in range(spec.nq)})
        row.update({f'y{i}': episodes.observations[0, k, i] for i in range(spec.obs_dim)})
        row.update({f'u{i}': episodes.actions[0, k, i] for i in range(spec.action_dim)})
        row['running_cost'] = episodes.costs[0, k]
        rows.append(row)
    return rows


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description='Generative Predictive Control lab: SPC, flow-matching policies, GPC and GPC+',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Train a pendulum policy with the profile defaults
  python main.py train --env pendulum --out runs/pendulum

  # Train from a run-config file
  python main.py train --config runs/cartpole.env --out runs/cartpole

  # Evaluate the policy alone with full warm-starts
  python main.py eval --checkpoint runs/pendulum/checkpoint.json --mode gpc --alpha 1.0

  # Plain SPC needs no checkpoint
  python main.py eval --env pendulum --mode spc --episodes 20

  # One episode as a time series
  python main.py rollout --checkpoint runs/pendulum/checkpoint.json --out runs/pendulum

  # Latency and throughput
  python main.py bench --env pendulum

  # Warm-start ablation, DR robustness, nav2d multimodality
  python main.py study --study multimodality --env nav2d
        """
    )

    parser.add_argument('command', choices=COMMANDS, help='What to run')
    parser.add_argument('--config', type=str, default=None,
                        help='Run-config file with key = value lines')
    parser.add_argument('--env', type=str, default=None,
                        help='Environment: pendulum, cartpole, double_cartpole, nav2d')
    parser.add_argument('--out', type=str, default='runs/latest',
                        help='Output directory (default: runs/latest)')
    parser.add_argument('--mode', type=str, choices=MODES, default=None,
                        help='Deployment mode for eval/rollout (default: gpc with a checkpoint, else spc)')
    parser.add_argument('--episodes', type=int, default=None,
                        help=f'Evaluation episodes (default: {config.EVAL_EPISODES})')
    parser.add_argument('--alpha', type=float, default=None,
                        help=f'Warm-start level in [0, 1] (default: {config.WARM_START})')
    parser.add_argument('--seed', type=int, default=None, help='Master seed')
    parser.add_argument('--checkpoint', type=str, default=None, help='Checkpoint document')
    parser.add_argument('--workers', type=int, default=None,
                        help='Worker processes for parallel environments')
    parser.add_argument('--steps', type=int, default=1000,
                        help='Planning steps timed per mode by bench (default: 1000)')
    parser.add_argument('--study', type=str, choices=STUDIES, default=None,
                        help='Study to run with the study command')
    parser.add_argument('--debug', '-d', action='store_true', help='Enable debug logging')
    return parser


def main(argv=None) -> int:
    """Main entry point; returns the process exit code"""
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.alpha is not None and not 0.0 <= args.alpha <= 1.0:
        parser.error("--alpha must be between 0 and 1")
    if args.episodes is not None and args.episodes < 1:
        parser.error("--episodes must be at least 1")

    try:
        lab = GpcLab(args)
        return lab.run()

    except ConfigError as e:
        console.print(f"\n❌ Configuration error: {e}")
        return 2

    except GpcError as e:
        console.print(f"\n❌ Error: {e}")
        return 3

    except KeyboardInterrupt:
        console.print("\n\n⚠️  Interrupted by user")
        return 3

    except Exception as e:
        console.print(f"\n❌ Fatal error: {e}")
        import traceback
        traceback.print_exc()
        return 3


if __name__ == '__main__':
    sys.exit(main())

"""
模拟命令的公共部分：参数、配置加载、输出目录与退出码映射。

退出码：0 成功；2 配置错误（含定义域错误）；3 统计量不足；4 内部错误。
"""

import logging
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from photonics.models import MAX_SEED, load_config, resolve_preset
from photonics.services.errors import ConfigError, DomainError, StatisticsError
from photonics.services.pipeline import default_threads, estimate_events
from photonics.services.reporting import OutputWriter

logger = logging.getLogger("photonics")

EXIT_CONFIG = 2
EXIT_STATISTICS = 3
EXIT_INTERNAL = 4


class SimulationCommand(BaseCommand):
    """子类实现 execute_run(config, writer, threads)，返回要打印的摘要行。"""

    command_name = ""

    def add_arguments(self, parser):
        parser.add_argument("--config", required=True, help="配置文件路径，或内置预设名（paper / ideal / lowrate）")
        parser.add_argument("--seed", type=int, help="覆盖配置中的随机种子")
        parser.add_argument("--out", help="输出目录（默认：配置中的 output_dir，或 PAIRSIM_OUTPUT_DIR/<命令名>）")
        parser.add_argument("--threads", type=int, help="工作线程数（默认：机器并行度）")
        parser.add_argument("--yes", action="store_true", help="预计事件数超过阈值时仍然运行")

    def handle(self, *args, **options):
        if options.get("verbosity", 1) >= 2:
            logger.setLevel(logging.DEBUG)
        try:
            self._handle(options)
        except CommandError:
            raise
        except (ConfigError, DomainError) as e:
            raise CommandError(f"configuration error: {e}", returncode=EXIT_CONFIG) from e
        except StatisticsError as e:
            if e.counts:
                self.stderr.write("counts: " + ", ".join(f"{k}={v}" for k, v in sorted(e.counts.items())))
            raise CommandError(f"insufficient statistics: {e}", returncode=EXIT_STATISTICS) from e
        except Exception as e:
            logger.exception("%s failed", self.command_name)
            raise CommandError(f"internal error: {e}", returncode=EXIT_INTERNAL) from e

    def _handle(self, options):
        config = load_config(resolve_preset(options["config"]))
        if options.get("seed") is not None:
            seed = options["seed"]
            if not 0 <= seed <= MAX_SEED:
                raise ConfigError(f"must lie in [0, {MAX_SEED}], got {seed}", "seed")
            config.seed = seed

        threads = options.get("threads") or config.threads or default_threads()
        if threads < 1:
            raise ConfigError("must be at least 1", "threads")

        events = estimate_events(config, self.command_name)
        if events:
            self.stdout.write(f"estimated events: {events:.3g}")
            threshold = float(getattr(settings, "PAIRSIM_CONFIRM_EVENTS", 1e9))
            if events > threshold and not options.get("yes"):
                raise CommandError(
                    f"estimated {events:.3g} events exceeds {threshold:.3g}; re-run with --yes to proceed",
                    returncode=EXIT_CONFIG,
                )

        writer = OutputWriter(self.output_dir(config, options), self.command_name, config.digest(), config.seed)
        for line in self.execute_run(config, writer, threads) or ():
            self.stdout.write(line)
        manifest = writer.finish()
        self.stdout.write(self.style.SUCCESS(f"{len(manifest.outputs)} files written to {writer.out_dir}"))

    def output_dir(self, config, options) -> Path:
        if options.get("out"):
            return Path(options["out"])
        if config.output_dir:
            return Path(config.output_dir)
        return Path(getattr(settings, "PAIRSIM_OUTPUT_DIR", "output")) / self.command_name

    def execute_run(self, config, writer, threads):
        raise NotImplementedError

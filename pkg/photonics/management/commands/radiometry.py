from photonics.services.pipeline import format_radiometry, run_radiometry

from ._base import SimulationCommand


class Command(SimulationCommand):
    help = "源的辐射度预算：相干时间、每模式平均光子数、光谱亮度（两种模式时间约定并列）"
    command_name = "radiometry"

    def execute_run(self, config, writer, threads):
        report = run_radiometry(config, writer)
        return format_radiometry(report).splitlines()

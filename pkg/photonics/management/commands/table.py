from photonics.services import run_table

from ._base import SimulationCommand


class Command(SimulationCommand):
    help = "窄带光子源对比表"
    command_name = "table"

    def execute_run(self, config, writer, threads):
        return run_table(config, writer).to_text().splitlines()

from photonics.services import run_hom_runs

from ._base import SimulationCommand


def _pct(value) -> str:
    return "n/a" if value is None else f"{100.0 * value:.1f}%"


class Command(SimulationCommand):
    help = "双源 Hong-Ou-Mandel 四重符合：凹陷直方图、可见度与四重符合率"
    command_name = "hom"

    def execute_run(self, config, writer, threads):
        lines = []
        for run, result in run_hom_runs(config, writer, threads):
            line = f"{run.name}: {int(result.histogram.total_events)} four-folds, {result.fourfold_rate:.4g} /hour"
            if result.visibility is not None:
                line += (
                    f", visibility {_pct(result.visibility)} (intrinsic {_pct(result.intrinsic_visibility)}), "
                    f"dip width {result.dip_width_fwhm_ps:.1f} ps"
                )
            lines.append(line)
        return lines

from photonics.services.pipeline import deconvolution_summary, run_coincidence

from ._base import SimulationCommand


class Command(SimulationCommand):
    help = "符合计数直方图与峰宽拟合（滤波 / 未滤波），并给出抖动扣除后的单光子宽度"
    command_name = "coincidence"

    def execute_run(self, config, writer, threads):
        outcomes = run_coincidence(config, writer, threads)
        lines = []
        for outcome in outcomes:
            stats = outcome.histogram.stats()
            lines.append(
                f"{outcome.run.name}: {stats['total_events']} coincidences, "
                f"FWHM {outcome.fit.fwhm_ps:.1f} +/- {outcome.fit.fwhm_stderr_ps:.1f} ps "
                f"(expected {outcome.expected_fwhm_ps:.1f} ps)"
            )
        summary = deconvolution_summary(outcomes)
        if summary is not None:
            lines.append(f"photon coherence width after jitter removal: {summary['photon_coherence_fwhm_ps']:.1f} ps")
        return lines

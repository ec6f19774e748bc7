from .pipeline import run_coincidence, run_hom_runs, run_radiometry, run_table

__all__ = ["run_coincidence", "run_hom_runs", "run_radiometry", "run_table"]

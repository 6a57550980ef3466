"""Neural approximations of linear MPC with a feasibility-guaranteeing projection layer."""

__version__ = "0.1.0"

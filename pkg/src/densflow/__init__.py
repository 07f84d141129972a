"""densflow: simulation-based inference with generative density estimators.

Train a neural vector-field model on simulator output with flow matching,
denoising score matching (VP or VE), or sigma-preconditioned denoising
diffusion; draw posterior samples through interchangeable ODE/SDE solvers;
and check the result with calibration diagnostics (SBC, TARP, C2ST, LC2ST,
marginal coverage) on built-in benchmark tasks.
"""

__version__ = "0.1.0"

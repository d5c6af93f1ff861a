"""Joint state and line impedance estimation for unbalanced low-voltage feeders from smart-meter data."""

from .estimation import IME_DIAGONAL, IME_TRANSPOSED, IME_UNTRANSPOSED, LLE, MODES, SE, BuildOptions, build
from .network import Branch, Bus, Feeder, ImpedanceMatrix, Linecode, User
from .solver import SolverOptions, solve

__version__ = "0.1.0"

__all__ = [
    "Branch", "BuildOptions", "Bus", "Feeder", "IME_DIAGONAL", "IME_TRANSPOSED", "IME_UNTRANSPOSED",
    "ImpedanceMatrix", "LLE", "Linecode", "MODES", "SE", "SolverOptions", "User", "build", "solve",
]

"""Unit conventions.

All Hamiltonian matrices carry angular frequencies in rad/ns. Public
interfaces quote plain frequencies in MHz (what a signal generator or a
coupling-strength fit reports) and times in ns. The two are linked by

    omega [rad/ns] = 2 pi * 1e-3 * f [MHz]

since 1 MHz = 1e-3 cycles/ns. Relaxation times T1/T2/Tphi are quoted in us
at the interfaces and converted to ns internally.
"""

import math

ANG_PER_MHZ: float = 2.0 * math.pi * 1e-3
"""rad/ns per MHz."""

NS_PER_US: float = 1000.0


def mhz_to_ang(f_mhz: float) -> float:
    """Frequency in MHz to angular frequency in rad/ns."""
    return f_mhz * ANG_PER_MHZ


def ang_to_mhz(w: float) -> float:
    """Angular frequency in rad/ns to frequency in MHz."""
    return w / ANG_PER_MHZ


def us_to_ns(t_us: float) -> float:
    return t_us * NS_PER_US


def transfer_time_ns(f_j_mhz: float) -> float:
    """Mirror time tau = pi / J for the line/zig-zag families.

    With J = 2 pi * 1e-3 * f_J rad/ns this is tau = 500 / f_J ns.
    """
    if f_j_mhz <= 0.0:
        raise ValueError("coupling scale must be positive")
    return 500.0 / f_j_mhz

"""Unit conventions and conversions.

Traffic quantities live in (km, h, veh, g); the chemistry works in
molecule/cm^3 because its rate constants are stated in those units.
Every gram <-> molecule conversion goes through this module.
"""

from dataclasses import dataclass, field

AVOGADRO = 6.02214076e23  # 1/mol

# molar masses in g/mol
MOLAR_MASS = {"O": 16.0, "O2": 32.0, "O3": 48.0, "NO": 30.0, "NO2": 46.0}

SPECIES = ("O", "O2", "O3", "NO", "NO2")

KMH_TO_MS = 1000.0 / 3600.0
MS_TO_KMH = 3600.0 / 1000.0
# km/h^2 expressed in m/s^2
KMH2_TO_MS2 = 1000.0 / 3600.0**2
CM3_PER_KM3 = 1.0e15
S_PER_H = 3600.0


@dataclass(frozen=True)
class UnitContext:
    """Molar masses and Avogadro number used for concentration conversions."""

    molar_masses: dict = field(default_factory=lambda: dict(MOLAR_MASS))
    avogadro: float = AVOGADRO

    def __post_init__(self):
        for name, mass in self.molar_masses.items():
            if mass <= 0:
                raise ValueError(f"molar mass of {name} must be positive")

    def g_per_km3_to_molec_per_cm3(self, value, species):
        """Convert a concentration in g/km^3 to molecule/cm^3."""
        mass = self.molar_masses[species]
        return value / CM3_PER_KM3 / mass * self.avogadro

    def molec_per_cm3_to_g_per_km3(self, value, species):
        """Convert a concentration in molecule/cm^3 to g/km^3."""
        mass = self.molar_masses[species]
        return value * CM3_PER_KM3 * mass / self.avogadro


DEFAULT_UNITS = UnitContext()

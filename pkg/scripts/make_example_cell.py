"""Regenerate src/cidra/data/example_cell.ini.

The values are representative of a graphite-SiOx / NMC811 21700 cell taken
from openly published parameter sets. They are NOT a validated dataset; use
them for exercising the code, not for engineering decisions.
"""

from pathlib import Path

import numpy as np

from cidra.cellparams import CellParams, DomainParams, OcpCurve, dump_params

OUT = Path(__file__).resolve().parents[1] / "src" / "cidra" / "data" / "example_cell.ini"


def u_neg(x):
    return (
        1.9793 * np.exp(-39.3631 * x)
        + 0.2482
        - 0.0909 * np.tanh(29.8538 * (x - 0.1234))
        - 0.04478 * np.tanh(14.9159 * (x - 0.2769))
        - 0.0205 * np.tanh(30.4444 * (x - 0.6103))
    )


def u_pos(x):
    return (
        -0.8090 * x
        + 4.4875
        - 0.0428 * np.tanh(18.5138 * (x - 0.5542))
        - 17.7326 * np.tanh(15.7890 * (x - 0.3117))
        + 17.5842 * np.tanh(15.9308 * (x - 0.3120))
    )


def main():
    grid = np.round(np.linspace(0.0, 1.0, 201), 6)
    neg_r = 5.86e-6
    pos_r = 5.22e-6
    params = CellParams(
        description="REPRESENTATIVE graphite-SiOx/NMC811 21700 cell; not a validated dataset",
        neg=DomainParams(
            name="neg",
            thickness=85.2e-6,
            porosity=0.25,
            bruggeman=1.5,
            solid_conductivity=215.0,
            particle_radius=neg_r,
            solid_diffusivity=3.3e-14,
            surface_area_density=round(3 * 0.75 / neg_r, 3),
            max_concentration=33133.0,
            reaction_rate=6.48e-7,
            stoich_window=(0.0279, 0.9014),
            film_resistance=1e-3,
        ),
        sep=DomainParams(name="sep", thickness=12e-6, porosity=0.47, bruggeman=1.5),
        pos=DomainParams(
            name="pos",
            thickness=75.6e-6,
            porosity=0.335,
            bruggeman=1.5,
            solid_conductivity=0.18,
            particle_radius=pos_r,
            solid_diffusivity=4.0e-15,
            surface_area_density=round(3 * 0.665 / pos_r, 3),
            max_concentration=63104.0,
            reaction_rate=3.42e-6,
            stoich_window=(0.2661, 0.9084),
            film_resistance=0.0,
        ),
        electrolyte_diffusivity=1.769e-10,
        electrolyte_conductivity=0.9487,
        transference=0.2594,
        electrolyte_concentration=1000.0,
        plate_area=0.1027,
        temperature=298.15,
        ocp_neg=OcpCurve(grid, u_neg(grid)),
        ocp_pos=OcpCurve(grid, u_pos(grid)),
        voltage_limits=(2.5, 4.2),
    )
    OUT.write_text(dump_params(params), encoding="utf-8")
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()

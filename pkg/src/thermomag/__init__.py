"""Thermo-magnetic control of an NV qubit frequency, simulated end to end.

Submodules
----------
env_trace       room-temperature logs and synthetic ambient traces
thermal_plant   two-node magnet/thermistor thermal model
magnet_field    magnetisation vs temperature, field and NV frequency
control         PID, Ziegler-Nichols tuning, set-point feedforward
spectroscopy    ODMR, PL relaxometry, cross-relaxation spectra, stability runs
spin_bath       13C bath sampling and scattering-matrix polarisation dynamics
scenario        scenario files, experiment runner, manifests
"""

__version__ = "0.1.0"

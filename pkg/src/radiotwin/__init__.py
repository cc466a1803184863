"""Desk-scale digital twin toolkit for cellular radio coverage."""

__version__ = "0.1.0"

GRID_SIZE = 512
NO_COVERAGE_DBM = -140.0
SPEED_OF_LIGHT = 299_792_458.0
RX_HEIGHT_M = 1.5

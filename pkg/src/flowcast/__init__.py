"""Hourly visitor-flow forecasting on street graphs.

The package covers the whole desk-scale pipeline: loading a street graph and
attaching points of interest, binning raw geolocation pings onto graph nodes,
building calendar/weather feature matrices and windowed supervised datasets,
training recurrent forecasters (including a graph-masked continuous-time
variant) with hand-written backpropagation, classic baselines (naive, ARIMA),
evaluation reports, and a synthetic data generator used for end-to-end tests.
"""

__version__ = "0.1.0"

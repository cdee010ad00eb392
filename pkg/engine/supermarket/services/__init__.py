"""Mean-field, fixed-point, simulation and performance services."""

"""Where and how results are saved."""

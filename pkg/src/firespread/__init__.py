"""Next-day wildfire spread prediction: data, models, training and shift diagnostics."""

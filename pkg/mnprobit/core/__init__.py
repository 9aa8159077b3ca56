"""Model, Gaussian toolkit, exact posterior and variational approximation."""

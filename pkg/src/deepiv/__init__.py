"""Deep instrumental-variable networks for counterfactual prediction."""

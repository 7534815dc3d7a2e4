# Multilevel stochastic collocation

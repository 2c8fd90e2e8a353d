# Optimizer package

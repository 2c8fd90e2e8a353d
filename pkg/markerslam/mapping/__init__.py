# Map store package

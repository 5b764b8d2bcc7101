# cardioseg application package

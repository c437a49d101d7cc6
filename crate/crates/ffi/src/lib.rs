// placeholder until the core API lands

# shared package marker

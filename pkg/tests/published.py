"""Published reference figures the cost model is checked against (GFLOPs, billions of params)."""

RATIOS = ((728, 32), (728, 64), (728, 200), (728, 728), (728, 1000))

# decoder totals, (vanilla, himix) per V:L ratio above
TOTALS = {
    "qwen2-0.5b": [(801, 44), (837, 78), (991, 224), (1620, 821), (1970, 1150)],
    "tinyllama-1.1b": [(1680, 92), (1750, 161), (2080, 466), (3400, 1720), (4120, 2400)],
    "llama3.2-1b": [(1950, 110), (2040, 192), (2410, 546), (3880, 1970), (4660, 2730)],
    "llama3.2-3b": [(5080, 310), (5310, 525), (6260, 1450), (10090, 5140), (12130, 7120)],
}

# (F_Attn, F_FFN) for vanilla then himix, per ratio
COMPONENTS = {
    "qwen2-0.5b": [((117, 476), (15, 19)), ((124, 497), (20, 40)), ((156, 582), (44, 126)),
                   ((311, 914), (166, 457)), ((410, 1085), (248, 628))],
    "tinyllama-1.1b": [((420, 1157), (37, 49)), ((442, 1206), (55, 97)), ((541, 1413), (136, 304)),
                       ((988, 2217), (513, 1109)), ((1258, 2631), (747, 1523))],
    "llama3.2-1b": [((331, 1224), (41, 50)), ((348, 1276), (56, 103)), ((425, 1495), (119, 322)),
                    ((768, 2345), (411, 1173)), ((973, 2783), (590, 1611))],
    "llama3.2-3b": [((1270, 3213), (148, 131)), ((1333, 3349), (204, 270)), ((1605, 3924), (442, 846)),
                    ((2783, 6156), (1488, 3078)), ((3465, 7306), (2101, 4228))],
}

# decoder params, (vanilla, himix)
PARAMS = {
    "qwen2-0.5b": (0.49, 0.50),
    "tinyllama-1.1b": (1.10, 1.11),
    "llama3.2-1b": (1.24, 1.25),
    "llama3.2-3b": (3.21, 3.28),
}

# 7B decoder at 728:64; its params column also includes the 0.43 B vision encoder
VICUNA = {"flops": (10800, 1310), "params": (7.19, 7.47), "encoder_params": 0.43}

# Llama-3.2-1B at 728:64: shared-injection variants and token pruning (K, R) -> GFLOPs
UNIFORM_FLOPS = (214, 201)  # two reported figures for the uniform setup
CONNECTOR_FLOPS = 354
PRUNING = {(2, 0.9): 510, (2, 0.75): 758, (2, 0.5): 1180, (3, 0.9): 595, (3, 0.75): 829,
           (3, 0.5): 1230, (5, 0.9): 765, (5, 0.5): 1320}

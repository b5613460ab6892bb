// Generated with 50-digit mpmath. Columns: w_hat, pos, alpha, eta,
// sigma_init, rho_init, gaussian prior sigma, slab sigma, spike sigma, mixture sigma.
pub const SCHEDULE_TABLE: [(f64, usize, f64, f64, f64, f64, f64, f64, f64, f64); 30] = [
    (1.0, 1, 0.05, 0.5, 0.05, -2.9706281090573771031, 1.313261687518222834, 1.313261687518222834, 1.313261687518222834, 1.313261687518222834),
    (-2.0, 2, 0.01, 0.25, 0.01, -4.6001660193248969181, 0.97407698418010668087, 1.313261687518222834, 0.82593941987884356221, 0.97097683234882235373),
    (0.5, 3, 0.1, 0.75, 0.016666666666666666667, -4.0859996548414849974, 0.87363890802274178749, 1.313261687518222834, 0.75024515281255137092, 1.1975847119336025936),
    (-0.125, 4, 0.5, 0.1, 0.015625, -4.1510604108543261668, 0.82593941987884356221, 1.313261687518222834, 0.72488538235777553257, 0.80335456791550119609),
    (0.0375, 5, 0.005, 0.9, 0.0000375, -10.191150874929315223, 0.79813886938159183968, 1.313261687518222834, 0.71334716722803402563, 1.2661267914439356789),
    (-0.9, 6, 0.05, 0.0, 0.0075, -4.8890999146909709273, 0.77994872476630408397, 1.313261687518222834, 0.70713251696537045978, 0.70713251696537045978),
    (3.25, 7, 0.01, 1.0, 0.0046428571428571428571, -5.3701030119587226195, 0.76712460610841565204, 1.313261687518222834, 0.70340332293013489233, 1.313261687518222834),
    (-0.0042, 8, 0.1, 0.5, 0.0000525, -9.8546711382518522924, 0.75759903531716906624, 1.313261687518222834, 0.70099019782763450387, 1.0526261248310428746),
    (0.61, 9, 0.5, 0.25, 0.033888888888888888889, -3.3676757833582066659, 0.75024515281255137092, 1.313261687518222834, 0.69933907191891129403, 0.89329189972265265492),
    (-1.7, 10, 0.005, 0.75, 0.00085, -7.0698491783757454798, 0.74439666007357089483, 1.313261687518222834, 0.6981596805078623233, 1.1896843824305326509),
    (0.64701, 11, 0.05, 0.1, 0.0029409545454545454545, -5.8275502373458961408, 0.73963442832543080618, 1.313261687518222834, 0.69728794960879890174, 0.78106021675220382741),
    (1.625452, 12, 0.01, 0.9, 0.0013545433333333333333, -6.6036135567096954625, 0.7356816517249077899, 1.313261687518222834, 0.69662543093363489878, 1.2651953734563040098),
    (-1.446906, 1, 0.1, 0.0, 0.1446906, -1.8599401545065037312, 1.313261687518222834, 1.313261687518222834, 1.313261687518222834, 1.313261687518222834),
    (-2.100959, 2, 0.5, 1.0, 0.52523975, -0.3698120237719995715, 0.97407698418010668087, 1.313261687518222834, 0.82593941987884356221, 1.313261687518222834),
    (1.30946, 3, 0.005, 0.5, 0.0021824333333333333333, -6.1262234016013554245, 0.87363890802274178749, 1.313261687518222834, 0.75024515281255137092, 1.0694681035968157648),
    (2.190023, 4, 0.05, 0.25, 0.0273752875, -3.5843957197972790253, 0.82593941987884356221, 1.313261687518222834, 0.72488538235777553257, 0.90843721750200570063),
    (-0.99206, 5, 0.01, 0.75, 0.00198412, -6.2215875640470619452, 0.79813886938159183968, 1.313261687518222834, 0.71334716722803402563, 1.1919346627124630074),
    (-1.61039, 6, 0.1, 0.1, 0.026839833333333333333, -3.6044182443549226673, 0.77994872476630408397, 1.313261687518222834, 0.70713251696537045978, 0.78898566709739599845),
    (1.067995, 7, 0.5, 0.9, 0.076285357142857142857, -2.5348891266012562732, 0.76712460610841565204, 1.313261687518222834, 0.70340332293013489233, 1.2655703288967408797),
    (2.407675, 8, 0.005, 0.0, 0.001504796875, -6.4983448638794753985, 0.75759903531716906624, 1.313261687518222834, 0.70099019782763450387, 0.70099019782763450387),
    (-2.25442, 9, 0.05, 1.0, 0.012524555555555555556, -4.3737953034374559477, 0.75024515281255137092, 1.313261687518222834, 0.69933907191891129403, 1.313261687518222834),
    (-2.700377, 10, 0.01, 0.5, 0.002700377, -5.913013393754720977, 0.74439666007357089483, 1.313261687518222834, 0.6981596805078623233, 1.0516851238346130449),
    (-0.851241, 11, 0.1, 0.25, 0.0077385545454545454545, -4.8576685875646961536, 0.73963442832543080618, 1.313261687518222834, 0.69728794960879890174, 0.89208852053932111245),
    (-1.203323, 12, 0.5, 0.75, 0.050138458333333333333, -2.9677929626181083262, 0.7356816517249077899, 1.313261687518222834, 0.69662543093363489878, 1.1894595170426254984),
    (0.610395, 1, 0.005, 0.1, 0.003051975, -5.790439981337132005, 1.313261687518222834, 1.313261687518222834, 1.313261687518222834, 1.313261687518222834),
    (-1.90994, 2, 0.05, 0.9, 0.0477485, -3.0178383813306775246, 0.97407698418010668087, 1.313261687518222834, 0.82593941987884356221, 1.2729525625269267608),
    (-2.813892, 3, 0.01, 0.0, 0.00937964, -4.6645204104988490843, 0.87363890802274178749, 1.313261687518222834, 0.75024515281255137092, 0.75024515281255137092),
    (-1.039769, 4, 0.1, 1.0, 0.025994225, -3.6368556145195190655, 0.82593941987884356221, 1.313261687518222834, 0.72488538235777553257, 1.313261687518222834),
    (-1.590523, 5, 0.5, 0.5, 0.1590523, -1.7579422040639268209, 0.79813886938159183968, 1.313261687518222834, 0.71334716722803402563, 1.0567687639440028172),
    (-1.193407, 6, 0.005, 0.25, 0.00099450583333333333333, -6.9127672999666053401, 0.77994872476630408397, 1.313261687518222834, 0.70713251696537045978, 0.89788159708735402102),
];

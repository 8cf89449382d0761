/* tslint:disable */
/* eslint-disable */

export class Scene {
    free(): void;
    [Symbol.dispose](): void;
    blurry_rgba(): Uint8Array;
    /**
     * Hue is the blur axis, brightness the local magnitude.
     */
    field_rgba(): Uint8Array;
    input_psnr(): number;
    /**
     * Local blur length in pixels at the current strength.
     */
    magnitude_at(x: number, y: number): number;
    /**
     * A procedural scene and a random motion field. `size` must be at
     * least 32.
     */
    constructor(seed: bigint, size: number, max_magnitude: number, max_segments: number);
    /**
     * Grey-scale PSF under pixel `(x, y)`, normalised to its peak.
     */
    psf_rgba(x: number, y: number, side: number): Uint8Array;
    /**
     * Re-blur with every motion vector scaled by `s`.
     */
    set_strength(s: number): void;
    sharp_rgba(): Uint8Array;
    size(): number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_scene_free: (a: number, b: number) => void;
    readonly scene_blurry_rgba: (a: number) => [number, number];
    readonly scene_field_rgba: (a: number) => [number, number];
    readonly scene_input_psnr: (a: number) => number;
    readonly scene_magnitude_at: (a: number, b: number, c: number) => number;
    readonly scene_new: (a: bigint, b: number, c: number, d: number) => [number, number, number];
    readonly scene_psf_rgba: (a: number, b: number, c: number, d: number) => [number, number];
    readonly scene_set_strength: (a: number, b: number) => [number, number];
    readonly scene_sharp_rgba: (a: number) => [number, number];
    readonly scene_size: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;

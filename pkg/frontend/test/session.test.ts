// UI contract tests: replay against a recorded server log, reject
// semantics, and the pending flag that makes duplicate in-flight steps
// impossible.

import { describe, expect, it, vi } from 'vitest';
import { readFileSync } from 'node:fs';
import { dirname, join } from 'node:path';
import { fileURLToPath } from 'node:url';

import { ApiError, ClassesInfo, StepResult } from '../src/api.js';
import {
    LogEntry,
    SessionApi,
    SessionController,
    applyStepResult,
    emptyView,
    replayLog,
    validateForm,
} from '../src/session.js';

const here = dirname(fileURLToPath(import.meta.url));
const fixture = JSON.parse(readFileSync(join(here, 'fixtures', 'session_log.json'), 'utf-8'));
const LOG: LogEntry[] = fixture.log;

const INFO: ClassesInfo = {
    classes: [
        { id: 0, name: 'class-0' },
        { id: 1, name: 'class-1' },
    ],
    train_len: 4,
    variant: 'equivariant',
    max_target_len: 64,
    image_h: 8,
    band_width: 4,
};

function stepResult(position: number, strip: string, done = false): StepResult {
    return { position, token_norm: 1.0, image_strip: strip, done };
}

describe('replay against the recorded server log', () => {
    it('renders the strip sequence in log order with rejects replacing in place', () => {
        // Independently derive the expected strip list from the transcript.
        const expected: string[] = [];
        for (const entry of LOG) {
            if (entry.status !== 200 || !entry.body) continue;
            const strip = entry.body['image_strip'] as string;
            if (entry.op === 'step') expected.push(strip);
            if (entry.op === 'reject') expected[expected.length - 1] = strip;
        }
        const view = replayLog(LOG);
        expect(view.strips).toEqual(expected);
        expect(view.strips.length).toBe(6);
        expect(view.done).toBe(true);
        expect(view.targetLen).toBe(6);
    });

    it('reject responses in the log only ever touch the latest position', () => {
        let strips: string[] = [];
        for (const entry of LOG) {
            if (entry.status !== 200 || !entry.body || !('position' in entry.body)) continue;
            const before = strips.slice();
            const view = applyStepResult(
                { ...emptyView(), strips, targetLen: 6 },
                entry.body as unknown as StepResult,
                entry.op as 'step' | 'reject',
            );
            strips = view.strips;
            if (entry.op === 'reject') {
                expect(strips.length).toBe(before.length);
                expect(strips.slice(0, -1)).toEqual(before.slice(0, -1));
                expect(entry.body['position']).toBe(strips.length - 1);
            } else {
                expect(strips.slice(0, -1)).toEqual(before);
            }
        }
    });

    it('positions stay contiguous from zero', () => {
        const positions = LOG.filter((e) => e.op === 'step' && e.status === 200).map(
            (e) => e.body!['position'] as number,
        );
        expect(positions).toEqual([0, 1, 2, 3, 4, 5]);
    });
});

function makeApi(overrides: Partial<Record<keyof SessionApi, unknown>> = {}): SessionApi {
    return {
        createSession: vi.fn(async (body: { target_len: number }) => ({
            session_id: 'sid-1',
            config: {
                class_id: 0,
                target_len: body.target_len,
                seed: 7,
                cfg_start: 1,
                cfg_end: 1,
                n_steps: 4,
                temperature: 1,
            },
        })),
        step: vi.fn(async () => stepResult(0, 'AAA=')),
        reject: vi.fn(async () => stepResult(0, 'BBB=')),
        ...overrides,
    } as SessionApi;
}

describe('pending flag', () => {
    it('makes duplicate in-flight steps impossible', async () => {
        let release: (r: StepResult) => void = () => {};
        const hanging = new Promise<StepResult>((resolve) => (release = resolve));
        const api = makeApi({ step: vi.fn(() => hanging) });
        const controller = new SessionController(api);
        await controller.start({ classId: 0, targetLen: 4 }, INFO);

        const first = controller.step();
        const second = controller.step(); // issued while the first is in flight
        expect(controller.view.pending).toBe(true);
        await second;
        expect(api.step).toHaveBeenCalledTimes(1);

        release(stepResult(0, 'AAA='));
        await first;
        expect(controller.view.pending).toBe(false);
        expect(controller.view.strips).toEqual(['AAA=']);
    });

    it('blocks reject while a request is pending', async () => {
        let release: (r: StepResult) => void = () => {};
        const hanging = new Promise<StepResult>((resolve) => (release = resolve));
        const api = makeApi({ step: vi.fn(() => hanging) });
        const controller = new SessionController(api);
        await controller.start({ classId: 0, targetLen: 4 }, INFO);
        const inflight = controller.step();
        await controller.reject();
        expect(api.reject).not.toHaveBeenCalled();
        release(stepResult(0, 'AAA='));
        await inflight;
    });
});

describe('guards and state hints', () => {
    it('reject on an empty session never reaches the network', async () => {
        const api = makeApi();
        const controller = new SessionController(api);
        await controller.start({ classId: 0, targetLen: 4 }, INFO);
        await controller.reject();
        expect(api.reject).not.toHaveBeenCalled();
    });

    it('step after done never reaches the network', async () => {
        const api = makeApi({ step: vi.fn(async () => stepResult(0, 'AAA=', true)) });
        const controller = new SessionController(api);
        await controller.start({ classId: 0, targetLen: 1 }, INFO);
        await controller.step();
        expect(controller.view.done).toBe(true);
        await controller.step();
        expect(api.step).toHaveBeenCalledTimes(1);
    });

    it('409 and 423 surface as hints, not banners', async () => {
        const api = makeApi({
            step: vi.fn(async () => {
                throw new ApiError(423, 'step already in flight');
            }),
        });
        const controller = new SessionController(api);
        await controller.start({ classId: 0, targetLen: 4 }, INFO);
        await controller.step();
        expect(controller.view.banner).toBeNull();
        expect(controller.view.hint).toContain('in flight');
    });

    it('5xx surfaces as a dismissible banner', async () => {
        const api = makeApi({
            step: vi.fn(async () => {
                throw new ApiError(503, 'model not loaded');
            }),
        });
        const controller = new SessionController(api);
        await controller.start({ classId: 0, targetLen: 4 }, INFO);
        await controller.step();
        expect(controller.view.banner).toContain('503');
        controller.dismissBanner();
        expect(controller.view.banner).toBeNull();
    });

    it('invalid class is blocked client-side before any request', async () => {
        const api = makeApi();
        const controller = new SessionController(api);
        await controller.start({ classId: 9, targetLen: 4 }, INFO);
        expect(api.createSession).not.toHaveBeenCalled();
        expect(controller.view.banner).toContain('class 9');
    });

    it('baseline ceiling and server ceiling are validated up front', () => {
        expect(validateForm({ classId: 0, targetLen: 65 }, INFO)).toContain('[1, 64]');
        const base = { ...INFO, variant: 'baseline_2d' };
        expect(validateForm({ classId: 0, targetLen: 5 }, base)).toContain('cannot extrapolate');
        expect(validateForm({ classId: 0, targetLen: 4 }, base)).toBeNull();
    });
});

describe('strip append contract', () => {
    it('a step response at the wrong position raises a banner instead of corrupting strips', () => {
        const view = { ...emptyView(), strips: ['AAA='], targetLen: 4 };
        const out = applyStepResult(view, stepResult(3, 'CCC='), 'step');
        expect(out.banner).toContain('expected 1');
        expect(out.strips).toEqual(['AAA=']);
    });
});
